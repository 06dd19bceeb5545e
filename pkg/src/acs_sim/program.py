"""Call-graph programs that drive the simulated machine."""
from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

SITE_SHIFT = 4
FUNC_SHIFT = 20
MAX_SITES = 1 << (FUNC_SHIFT - SITE_SHIFT)
SETJMP_SITE = MAX_SITES - 1  # reserved site index for setjmp return sites


class MalformedProgram(ValueError):
    pass


def site_address(function_id: int, site_index: int) -> int:
    return (function_id << FUNC_SHIFT) | (site_index << SITE_SHIFT)


def function_of(addr: int) -> int:
    return addr >> FUNC_SHIFT


@dataclass(frozen=True)
class CallSite:
    callee: int
    ret_addr: int


@dataclass(frozen=True)
class FunctionDef:
    id: int
    name: str
    call_sites: Tuple[CallSite, ...] = ()
    tail_calls: Tuple[int, ...] = ()  # callees reached by a non-linking branch

    @property
    def is_leaf(self) -> bool:
        return not self.call_sites and not self.tail_calls


class CallGraphProgram:
    """Functions, call sites and synthesized return-site addresses.

    Function ids start at 1 so that no return site is ever address 0.
    """

    def __init__(self, functions: Sequence[FunctionDef], entry: Optional[int] = None,
                 va_size: int = 39):
        self.functions: Dict[int, FunctionDef] = {}
        for f in functions:
            if f.id in self.functions:
                raise MalformedProgram(f"duplicate function id {f.id}")
            if f.id < 1:
                raise MalformedProgram("function ids start at 1")
            self.functions[f.id] = f
        if functions and entry is None:
            entry = functions[0].id
        if entry is not None and entry not in self.functions:
            raise MalformedProgram(f"entry {entry} is not a function")
        self.entry = entry

        seen_addrs = set()
        seen_edges = set()
        for f in functions:
            for cs in f.call_sites:
                if cs.callee not in self.functions:
                    raise MalformedProgram(f"{f.name}: unknown callee {cs.callee}")
                if cs.ret_addr in seen_addrs:
                    raise MalformedProgram(f"return site {cs.ret_addr:#x} reused")
                if cs.ret_addr == 0 or cs.ret_addr >> va_size:
                    raise MalformedProgram(f"return site {cs.ret_addr:#x} not canonical")
                if function_of(cs.ret_addr) != f.id:
                    raise MalformedProgram(f"return site {cs.ret_addr:#x} outside {f.name}")
                if (cs.callee, cs.ret_addr) in seen_edges:
                    raise MalformedProgram("duplicate call edge")
                seen_addrs.add(cs.ret_addr)
                seen_edges.add((cs.callee, cs.ret_addr))
            for t in f.tail_calls:
                if t not in self.functions:
                    raise MalformedProgram(f"{f.name}: unknown tail callee {t}")
        self._by_name = {f.name: f for f in functions}

    @classmethod
    def from_calls(cls, calls: Mapping[str, Iterable[str]], entry: Optional[str] = None,
                   tail_calls: Optional[Mapping[str, Iterable[str]]] = None) -> "CallGraphProgram":
        """Build from ``{caller: [callee, ...]}``; one call site per list entry."""
        names: List[str] = []
        for caller, callees in calls.items():
            for n in (caller, *callees):
                if n not in names:
                    names.append(n)
        for caller, callees in (tail_calls or {}).items():
            for n in (caller, *callees):
                if n not in names:
                    names.append(n)
        ids = {n: i + 1 for i, n in enumerate(names)}
        funcs = []
        for n in names:
            fid = ids[n]
            sites = tuple(CallSite(ids[c], site_address(fid, k))
                          for k, c in enumerate(calls.get(n, ())))
            tails = tuple(ids[c] for c in (tail_calls or {}).get(n, ()))
            funcs.append(FunctionDef(fid, n, sites, tails))
        return cls(funcs, ids[entry] if entry else (funcs[0].id if funcs else None))

    def __len__(self):
        return len(self.functions)

    def __repr__(self):
        return f"CallGraphProgram({len(self.functions)} functions, entry={self.entry})"

    def fn(self, fid: int) -> FunctionDef:
        return self.functions[fid]

    def by_name(self, name: str) -> FunctionDef:
        return self._by_name[name]

    def has_function(self, fid: Optional[int]) -> bool:
        return fid in self.functions

    def return_sites(self) -> set:
        return {cs.ret_addr for f in self.functions.values() for cs in f.call_sites}

    def callers_of(self, fid: int) -> List[Tuple[int, int]]:
        """(caller id, site index) pairs calling ``fid``."""
        return [(f.id, k) for f in self.functions.values()
                for k, cs in enumerate(f.call_sites) if cs.callee == fid]

    def edges(self) -> set:
        """Edges of the return-site graph: ``(r, r')`` when the callee entered
        through return site ``r`` contains the call site returning to ``r'``."""
        out = set()
        for f in self.functions.values():
            for cs in f.call_sites:
                for inner in self.functions[cs.callee].call_sites:
                    out.add((cs.ret_addr, inner.ret_addr))
        return out

    def is_path(self, ret_addrs: Sequence[int]) -> bool:
        """True when ``ret_addrs`` is a call path starting in the entry function."""
        if not ret_addrs or self.entry is None:
            return False
        if function_of(ret_addrs[0]) != self.entry or ret_addrs[0] not in self.return_sites():
            return False
        edges = self.edges()
        return all((a, b) in edges for a, b in zip(ret_addrs, ret_addrs[1:]))

    def path_to(self, fid: int) -> List[int]:
        """Shortest list of site indices leading from the entry into ``fid``."""
        if self.entry is None:
            raise MalformedProgram("empty program")
        prev = {self.entry: None}
        q = deque([self.entry])
        while q:
            cur = q.popleft()
            if cur == fid:
                break
            for k, cs in enumerate(self.functions[cur].call_sites):
                if cs.callee not in prev:
                    prev[cs.callee] = (cur, k)
                    q.append(cs.callee)
        if fid not in prev:
            raise MalformedProgram(f"function {fid} unreachable from entry")
        out = []
        node = fid
        while prev[node] is not None:
            node, k = prev[node]
            out.append(k)
        return out[::-1]


# ---------------------------------------------------------------------------
# canonical shapes used by the attack harness
# ---------------------------------------------------------------------------

def sibling_calls_program() -> CallGraphProgram:
    """``func`` calls ``a`` then ``b`` at the same stack depth; both call a helper."""
    return CallGraphProgram.from_calls({
        "main": ["func"],
        "func": ["a", "b"],
        "a": ["helper"],
        "b": ["helper"],
        "helper": [],
    }, entry="main")


def recursive_loader_program() -> CallGraphProgram:
    """Recursive ``R`` reaches ``C`` through ``A`` or ``B``; ``C`` calls the
    loader ``L`` which calls ``M`` (so the loader's token lands on the stack).

    ``R`` recurses from two call sites, so the set of distinct paths into
    ``C`` grows as a binary tree rather than a single chain.
    """
    return CallGraphProgram.from_calls({
        "main": ["R"],
        "R": ["R", "R", "A", "B"],
        "A": ["C"],
        "B": ["C"],
        "C": ["L"],
        "L": ["M"],
        "M": [],
    }, entry="main")


def off_graph_program() -> CallGraphProgram:
    """``C`` is only ever called from ``A``; ``B``'s call site into ``D`` is a
    valid return site that is never composed with the loader ``L``."""
    return CallGraphProgram.from_calls({
        "main": ["A", "B"],
        "A": ["C"],
        "B": ["D"],
        "C": ["L"],
        "D": ["M"],
        "L": [],
        "M": [],
    }, entry="main")


def fork_server_program() -> CallGraphProgram:
    return CallGraphProgram.from_calls({
        "main": ["C"],
        "C": ["L"],
        "L": [],
    }, entry="main")


def tail_call_program() -> CallGraphProgram:
    """``F`` calls ``A`` which tail-calls ``B``. ``main`` first runs
    ``G`` -> ``H``, which leaves the authenticated return address of the
    ``G`` call site on the stack where it can be harvested."""
    return CallGraphProgram.from_calls({
        "main": ["G", "F"],
        "G": ["H"],
        "F": ["A"],
        "H": [],
        "A": [],
        "B": [],
    }, entry="main", tail_calls={"A": ["B"]})


def random_program(rng: random.Random, n_functions: int = 8, max_sites: int = 3) -> CallGraphProgram:
    names = [f"f{i}" for i in range(n_functions)]
    calls = {}
    for n in names:
        k = rng.randint(0, max_sites)
        calls[n] = [rng.choice(names) for _ in range(k)]
    calls[names[0]] = calls[names[0]] or [names[1 % n_functions]]
    return CallGraphProgram.from_calls(calls, entry=names[0])
