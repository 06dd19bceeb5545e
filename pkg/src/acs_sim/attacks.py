"""
Concrete adversary strategies against the simulated machine.

Every strategy is a per-trial function ``(factory, rng, ...) -> AttackOutcome``
and a runner that aggregates many trials into a :class:`TrialReport`. A
trial only counts as a success when the machine itself emits a ``Return``
(or ``LongJmp``/``SigReturn``) event to the adversary's chosen address.
"""
from __future__ import annotations

import functools
import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

from . import analytics
from .machine import (JmpBuf, LongJmp, Machine, Return, Scheme, SignalFrame, SigReturn,
                      TranslationFault)
from .pac import DEFAULT_LAYOUT, PacKey, PointerLayout, aut, is_canonical, pac_add, token_of
from .program import (FUNC_SHIFT, MAX_SITES, SITE_SHIFT, CallGraphProgram, fork_server_program,
                      off_graph_program, recursive_loader_program, sibling_calls_program,
                      tail_call_program)
from .stats import AttackOutcome, TrialReport, run_trials


class MissingShape(ValueError):
    """The program lacks the call-graph shape an attack needs."""


@dataclass
class MachineFactory:
    program: CallGraphProgram
    scheme: Scheme = Scheme.ACS_FULL
    layout: PointerLayout = DEFAULT_LAYOUT
    process_model: str = "strict"
    stack_words: int = 256
    cr_writable: bool = False
    reseed_on_fork: bool = False
    extra: dict = field(default_factory=dict)

    def make(self, rng: random.Random, **over) -> Machine:
        kw = dict(scheme=self.scheme, layout=self.layout, rng_seed=rng.getrandbits(64),
                  process_model=self.process_model, stack_words=self.stack_words,
                  cr_writable=self.cr_writable, reseed_on_fork=self.reseed_on_fork)
        kw.update(self.extra)
        kw.update(over)
        return Machine(self.program, **kw)


def _walk(m: Machine, sites: Sequence[int]):
    for s in sites:
        m.call_site(s)


def _unwind(m: Machine, n: int):
    for _ in range(n):
        m.do_return()


def _addr(layout: PointerLayout, word: int) -> int:
    return word & layout.addr_mask


def _non_site_address(layout: PointerLayout, rng: random.Random, fid: int) -> int:
    """A canonical address inside function ``fid`` that no call site returns to."""
    return (fid << FUNC_SHIFT) | (rng.randrange(1, MAX_SITES) << SITE_SHIFT) | 0x8


# ---------------------------------------------------------------------------
# reuse under an SP modifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SiblingShape:
    path: tuple  # sites from the entry into the calling function
    site_first: int
    site_second: int
    ret_first: int
    ret_second: int


def find_sibling_shape(program: CallGraphProgram) -> SiblingShape:
    """Two call sites in one function whose callees both make a call."""
    for f in program.functions.values():
        for i, a in enumerate(f.call_sites):
            for j, b in enumerate(f.call_sites):
                if j <= i:
                    continue
                if program.fn(a.callee).call_sites and program.fn(b.callee).call_sites:
                    try:
                        path = program.path_to(f.id)
                    except ValueError:
                        continue
                    return SiblingShape(tuple(path), i, j, a.ret_addr, b.ret_addr)
    raise MissingShape("need two call sites at equal stack depth whose callees call out")


def reuse_trial(factory: MachineFactory, shape: SiblingShape, rng: random.Random,
                index: int = 0) -> AttackOutcome:
    m = factory.make(rng)
    view = m.adversary()
    _walk(m, shape.path)
    m.call_site(shape.site_first)
    m.call_site(0)
    # two words below the innermost frame: the callee's slot and its callee's slot
    harvested = (view.read(view.sp - 2), view.read(view.sp - 1))
    _unwind(m, 2)
    m.call_site(shape.site_second)
    m.call_site(0)
    view.write(view.sp - 2, harvested[0])
    view.write(view.sp - 1, harvested[1])
    ev = m.do_return()
    # the shadow copy is authoritative, the stack word is never loaded
    ag_load = isinstance(ev, Return) and m.scheme is not Scheme.SHADOW_STACK
    success = False
    while isinstance(ev, Return):
        if ev.to_addr == shape.ret_first:
            success = True
            break
        if m.depth <= len(shape.path):
            break
        ev = m.do_return()
    crashed = m.halted and not success
    return AttackOutcome(success=success, ag_load=ag_load or success, crashed=crashed,
                         guesses_used=1, tokens_harvested=2, hijack_target=shape.ret_first)


def attack_reuse_sp_modifier(factory: MachineFactory, trials: int, seed: int = 0,
                             workers: int = 1) -> TrialReport:
    shape = find_sibling_shape(factory.program)
    outs = run_trials(functools.partial(reuse_trial, factory, shape), trials, seed, workers)
    b = factory.layout.pac_bits
    ref = {Scheme.SP_MODIFIER: 1.0, Scheme.UNINSTRUMENTED: 1.0, Scheme.SHADOW_STACK: 0.0}.get(
        factory.scheme, 2.0 ** -b)
    return TrialReport.from_outcomes("reuse-sp", outs, analytic_ref=ref)


# ---------------------------------------------------------------------------
# harvesting collisions along the call graph
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LoaderShape:
    path: tuple            # sites from the entry into the recursive function
    recursive_sites: tuple  # self-call sites of the recursive function
    vias: tuple            # (site in recursive fn, site in intermediate fn) reaching C
    site_loader: int       # site in C calling the loader L
    site_inner: int        # site in L calling M


def find_loader_shape(program: CallGraphProgram) -> LoaderShape:
    """A recursive function reaching a common ``C`` through intermediate
    functions, where ``C`` calls a loader that itself makes a call."""
    for r in program.functions.values():
        rec = tuple(k for k, cs in enumerate(r.call_sites) if cs.callee == r.id)
        if not rec:
            continue
        by_c = {}
        for k, cs in enumerate(r.call_sites):
            if cs.callee == r.id:
                continue
            x = program.fn(cs.callee)
            for j, cs2 in enumerate(x.call_sites):
                c = program.fn(cs2.callee)
                for li, cs3 in enumerate(c.call_sites):
                    if program.fn(cs3.callee).call_sites:
                        by_c.setdefault((c.id, li), []).append((k, j))
        for (cid, li), vias in sorted(by_c.items()):
            try:
                path = program.path_to(r.id)
            except ValueError:
                continue
            return LoaderShape(tuple(path), rec, tuple(vias), li, 0)
    raise MissingShape("need a recursive function reaching a loader through intermediates")


def _harvest_paths(m: Machine, shape: LoaderShape, max_depth: int):
    """Walk distinct call paths into ``M``; yields once per path while
    execution is paused inside ``M`` (frames of M, L, C on top)."""
    def node(d):
        for k, j in shape.vias:
            m.call_site(k)
            m.call_site(j)
            m.call_site(shape.site_loader)
            m.call_site(shape.site_inner)
            yield
            if m.halted:
                return
            _unwind(m, 4)
        if d < max_depth:
            for k in shape.recursive_sites:
                m.call_site(k)
                yield from node(d + 1)
                if m.halted:
                    return
                m.do_return()
    _walk(m, shape.path)
    yield from node(0)


def on_graph_trial(factory: MachineFactory, shape: LoaderShape, masked: bool, budget: int,
                   rng: random.Random, index: int = 0, max_depth: int = 16) -> AttackOutcome:
    """Harvest the stored return token of ``C`` over distinct paths.

    Unmasked: stop at the first pair of equal tokens with different
    predecessors and splice the earlier path's frames in. Masked: equal
    stored tokens mean nothing, so after ``budget`` paths splice in a
    uniformly chosen earlier candidate.
    """
    m = factory.make(rng)
    view = m.adversary()
    lo = m.layout.pac_lo
    seen_pred = set()
    by_token = {}
    cands = []
    harvested = 0
    chosen = None
    for _ in _harvest_paths(m, shape, max_depth):
        sp = view.sp
        s3, s2, s1 = view.read(sp - 1), view.read(sp - 2), view.read(sp - 3)
        if s2 in seen_pred:
            continue  # same predecessor word: not a new token
        seen_pred.add(s2)
        harvested += 1
        if masked:
            if harvested >= budget and cands:
                chosen = cands[rng.randrange(len(cands))]
                break
            cands.append((s2, s1))
        else:
            tok = s3 >> lo
            if tok in by_token:
                chosen = by_token[tok]
                break
            by_token[tok] = (s2, s1)
        if harvested >= budget:
            break
    if chosen is None:
        return AttackOutcome(tokens_harvested=harvested, guesses_used=0)
    s2y, s1y = chosen
    target = _addr(m.layout, s2y)
    sp = view.sp
    view.write(sp - 2, s2y)
    view.write(sp - 3, s1y)
    m.do_return()                 # M -> L
    ev = m.do_return()            # L -> C, authenticated against the substituted word
    ag_load = isinstance(ev, Return)
    success = False
    if ag_load:
        ev = m.do_return()        # C -> wherever the substituted word points
        success = isinstance(ev, Return) and ev.to_addr == target
    return AttackOutcome(success=success, ag_load=ag_load, crashed=m.halted and not success,
                         guesses_used=1, tokens_harvested=harvested, hijack_target=target)


def attack_on_graph(factory: MachineFactory, masked: bool, budget: Optional[int], trials: int,
                    seed: int = 0, workers: int = 1) -> TrialReport:
    shape = find_loader_shape(factory.program)
    b = factory.layout.pac_bits
    if budget is None:
        budget = 2 if masked else 8 * 2 ** (b // 2) + 64
    fn = functools.partial(on_graph_trial, factory, shape, masked, budget)
    outs = run_trials(fn, trials, seed, workers)
    if masked:
        return TrialReport.from_outcomes(
            "on-graph", outs, analytic_ref=analytics.violation_bound(analytics.ON_GRAPH, True, b),
            extra={"masked": True, "budget": budget})
    found = [o for o in outs if o.guesses_used]
    mean_q, var_q = analytics.birthday_moments(b) if b <= 24 else (
        analytics.expected_tokens_to_collision(b), None)
    rep = TrialReport.from_outcomes(
        "on-graph", outs, analytic_ref=analytics.expected_tokens_to_collision(b),
        compare="mean_harvested",
        extra={"masked": False, "budget": budget, "collisions_found": len(found),
               "replay_success_rate": (sum(o.success for o in found) / len(found)) if found else None,
               "exact_mean_tokens": mean_q, "exact_var_tokens": var_q})
    return rep


# ---------------------------------------------------------------------------
# off-graph violations
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OffGraphShape:
    harvest_path: tuple  # into a function two frames above a call site of interest
    victim_path: tuple   # into the loader below C
    c_id: int


def find_off_graph_shape(program: CallGraphProgram) -> OffGraphShape:
    try:
        c = program.by_name("C")
        lfn = program.by_name("L")
        m_fn = program.by_name("M")
    except KeyError:
        raise MissingShape("need functions C, L (called by C) and M on a disjoint path") from None
    victim = program.path_to(lfn.id)
    harvest = program.path_to(m_fn.id)
    if len(victim) < 3 or len(harvest) < 3:
        raise MissingShape("paths too short to hold two frames below the loader")
    return OffGraphShape(tuple(harvest), tuple(victim), c.id)


def off_graph_trial(factory: MachineFactory, shape: OffGraphShape, target_kind: str,
                    rng: random.Random, index: int = 0) -> AttackOutcome:
    m = factory.make(rng)
    view = m.adversary()
    layout = m.layout
    _walk(m, shape.harvest_path)
    # inside M: the top word is the authenticated return into the caller's
    # caller, the word below it is that value's predecessor
    aret_t, pred_t = view.read(view.sp - 1), view.read(view.sp - 2)
    _unwind(m, len(shape.harvest_path))
    _walk(m, shape.victim_path)
    if target_kind == "call_site":
        target = _addr(layout, aret_t)
        forged, pred = aret_t, pred_t
    elif target_kind == "arbitrary":
        target = _non_site_address(layout, rng, shape.c_id)
        forged = target | (rng.getrandbits(layout.pac_bits) << layout.pac_lo)
        pred = pred_t
    else:
        raise ValueError(f"unknown target kind {target_kind!r}")
    view.write(view.sp - 1, forged)
    view.write(view.sp - 2, pred)
    ev = m.do_return()            # L -> C, checked against the forged word
    ag_load = isinstance(ev, Return)
    success = False
    if ag_load:
        ev = m.do_return()        # C -> target, checked with the predecessor
        success = isinstance(ev, Return) and ev.to_addr == target
    return AttackOutcome(success=success, ag_load=ag_load, crashed=m.halted and not success,
                         guesses_used=1, tokens_harvested=2, hijack_target=target)


def attack_off_graph(factory: MachineFactory, target_kind: str, trials: int, seed: int = 0,
                     workers: int = 1) -> TrialReport:
    shape = find_off_graph_shape(factory.program)
    b = factory.layout.pac_bits
    vt = {"call_site": analytics.OFF_GRAPH_CALLSITE,
          "arbitrary": analytics.OFF_GRAPH_ARBITRARY}.get(target_kind)
    if vt is None:
        raise ValueError(f"unknown target kind {target_kind!r}")
    outs = run_trials(functools.partial(off_graph_trial, factory, shape, target_kind),
                      trials, seed, workers)
    fails = [o for o in outs if not o.success]
    return TrialReport.from_outcomes(
        "off-graph-" + target_kind.replace("_", ""), outs,
        analytic_ref=analytics.violation_bound(vt, factory.scheme is Scheme.ACS_FULL, b),
        extra={"failures_without_crash": sum(not o.crashed for o in fails)})


# ---------------------------------------------------------------------------
# brute force across forked siblings
# ---------------------------------------------------------------------------

def fork_trial(factory: MachineFactory, max_guesses: int, rng: random.Random,
               index: int = 0) -> AttackOutcome:
    """Guess against forked siblings until a hijack lands.

    Without re-seeding every sibling shares the parent's key and chain, so
    the two checks are attacked one after the other: first a forged word
    accepted by the loader's return, then a predecessor for it. With
    re-seeding no progress carries over between siblings, so each attempt
    is a fresh joint guess.
    """
    program = factory.program
    layout = factory.layout
    try:
        lfn = program.by_name("L")
    except KeyError:
        raise MissingShape("need a server function L") from None
    path = program.path_to(lfn.id)

    def spawn_parent():
        p = factory.make(rng)
        _walk(p, path)
        return p

    parent = spawn_parent()
    reseeded = factory.reseed_on_fork
    forged = None  # word accepted by the first check, once found
    attempts = 0
    target = None
    while attempts < max_guesses:
        attempts += 1
        if parent.tree_killed:
            parent = spawn_parent()
            forged = None
        child = parent.fork(attempts)
        view = child.adversary()
        if forged is None or reseeded:
            target = _non_site_address(layout, rng, lfn.id)
            word = target | (rng.getrandbits(layout.pac_bits) << layout.pac_lo)
        else:
            word = forged
        pred = rng.getrandbits(64)
        view.write(view.sp - 1, word)
        view.write(view.sp - 2, pred)
        ev = child.do_return()
        if not isinstance(ev, Return):
            continue
        forged = word
        ev = child.do_return()
        if isinstance(ev, Return) and ev.to_addr == target:
            return AttackOutcome(success=True, ag_load=True, guesses_used=attempts,
                                 hijack_target=target)
    return AttackOutcome(success=False, ag_load=forged is not None, crashed=True,
                         guesses_used=attempts, hijack_target=target)


def attack_fork_bruteforce(factory: MachineFactory, reseeded: bool, max_guesses: Optional[int],
                           trials: int, seed: int = 0, workers: int = 1) -> TrialReport:
    b = factory.layout.pac_bits
    if max_guesses is None:
        max_guesses = 32 * 2 ** (2 * b)
    fac = MachineFactory(**{**factory.__dict__, "reseed_on_fork": reseeded,
                            "stack_words": min(factory.stack_words, 16)})
    outs = run_trials(functools.partial(fork_trial, fac, max_guesses), trials, seed, workers)
    dc, joint = analytics.fork_guess_means(b)
    ref = joint if reseeded else dc
    return TrialReport.from_outcomes(
        "fork-bruteforce", outs, analytic_ref=ref, compare="mean_guesses", tolerance=0.10,
        extra={"reseeded": reseeded, "max_guesses": max_guesses,
               "exhausted": sum(not o.success for o in outs)})


# ---------------------------------------------------------------------------
# aut-then-pac signing gadget
# ---------------------------------------------------------------------------

def gadget_primitive_trial(layout: PointerLayout, rng: random.Random) -> bool:
    """Feed an invalid pointer through aut then pac_add; True when the output
    is the valid signature with exactly the gadget bit flipped."""
    key = PacKey.generate(rng)
    ptr = rng.getrandbits(layout.va_size)
    mod = rng.getrandbits(64)
    valid = pac_add(key, layout, ptr, mod)
    good = token_of(layout, valid)
    bad = rng.getrandbits(layout.pac_bits)
    while bad == good:
        bad = rng.getrandbits(layout.pac_bits)
    stripped = aut(key, layout, ptr | (bad << layout.pac_lo), mod)
    out = pac_add(key, layout, stripped, mod)
    return out ^ valid == layout.gadget_mask


def gadget_trial(factory: MachineFactory, rng: random.Random, index: int = 0) -> AttackOutcome:
    """Inject a harvested return token below a function that tail-calls.

    The failing check before the tail call leaves a corrupt LR which the
    callee's prologue re-signs with the gadget bit flipped. With the chain
    register out of reach that flip cannot be undone, so the callee's return
    faults.
    """
    prog = factory.program
    try:
        g, h, f, a = (prog.by_name(n) for n in ("G", "H", "F", "A"))
    except KeyError:
        raise MissingShape("need G -> H and F -> A with A tail-calling") from None
    if not a.tail_calls:
        raise MissingShape("A must end in a tail call")
    m = factory.make(rng)
    view = m.adversary()
    _walk(m, prog.path_to(h.id))
    harvested = view.read(view.sp - 1)  # authenticated return into main's G call site
    target = _addr(m.layout, harvested)
    _unwind(m, len(prog.path_to(h.id)))
    _walk(m, prog.path_to(a.id))
    view.write(view.sp - 1, harvested)
    m.do_tail_call(0)
    invoked = not is_canonical(m.layout, m.lr)
    if m.cr_writable:
        view.write_cr(view.read_cr() ^ m.layout.gadget_mask)
    ev = m.do_return()            # B -> F
    detected = invoked and isinstance(ev, TranslationFault)
    success = False
    ag_load = isinstance(ev, Return)
    while isinstance(ev, Return) and m.depth:
        ev = m.do_return()
        if isinstance(ev, Return) and ev.to_addr == target:
            success = True
            break
    return AttackOutcome(success=success, ag_load=ag_load, crashed=m.halted and not success,
                         guesses_used=1, tokens_harvested=1, hijack_target=target,
                         info={"gadget_invoked": invoked, "detected": detected})


def attack_signing_gadget(factory: MachineFactory, trials: int, seed: int = 0,
                          primitive_trials: int = 10_000, workers: int = 1) -> TrialReport:
    if not factory.scheme.is_acs:
        raise ValueError("the tail-call check applies to chained schemes only")
    prim_rng = random.Random(seed)
    flips = sum(gadget_primitive_trial(factory.layout, prim_rng) for _ in range(primitive_trials))
    outs = run_trials(functools.partial(gadget_trial, factory), trials, seed, workers)
    invoked = [o for o in outs if o.info["gadget_invoked"]]
    detected = sum(bool(o.info["detected"]) for o in invoked)
    rate = detected / len(invoked) if invoked else None
    hijacked = sum(o.success for o in invoked)
    rep = TrialReport.from_outcomes(
        "signing-gadget", outs, compare="none",
        extra={"primitive_trials": primitive_trials, "primitive_exact_flips": flips,
               "gadget_invocations": len(invoked), "detected": detected,
               "detection_rate": rate, "gadget_hijacks": hijacked,
               "cr_writable": factory.cr_writable,
               "lucky_first_checks": len(outs) - len(invoked)})
    if factory.cr_writable:
        rep.verdict = bool(invoked) and hijacked == len(invoked)
    else:
        rep.verdict = flips == primitive_trials and rate == 1.0
    return rep


# ---------------------------------------------------------------------------
# irregular unwinding
# ---------------------------------------------------------------------------

def setjmp_forgery_trial(factory: MachineFactory, rng: random.Random, index: int = 0) -> AttackOutcome:
    """Swap the address bits of a bound setjmp return value for another site."""
    prog = factory.program
    m = factory.make(rng)
    view = m.adversary()
    inner = max(prog.functions.values(), key=lambda f: len(prog.path_to(f.id)))
    _walk(m, prog.path_to(inner.id))
    buf = m.do_setjmp()
    honest = (m.current_fn << FUNC_SHIFT) | ((MAX_SITES - 1) << SITE_SHIFT)
    target = _non_site_address(m.layout, rng, m.current_fn)
    view.write(buf.addr + JmpBuf.ARET_B, view.read(buf.addr + JmpBuf.ARET_B) ^ honest ^ target)
    ev = m.do_longjmp(buf)
    success = isinstance(ev, LongJmp) and ev.to_addr == target
    return AttackOutcome(success=success, ag_load=success, crashed=m.halted and not success,
                         guesses_used=1, hijack_target=target)


def sigreturn_forgery_trial(factory: MachineFactory, rng: random.Random,
                            index: int = 0) -> AttackOutcome:
    m = factory.make(rng)
    view = m.adversary()
    prog = m.program
    _walk(m, prog.path_to(max(prog.functions.values(),
                              key=lambda f: len(prog.path_to(f.id))).id))
    frame = m.signal_deliver()
    target = _non_site_address(m.layout, rng, m.current_fn)
    view.write(frame.addr + SignalFrame.PC, target)
    ev = m.sigreturn(frame)
    success = isinstance(ev, SigReturn) and ev.to_addr == target
    return AttackOutcome(success=success, ag_load=success, crashed=m.halted and not success,
                         guesses_used=1, hijack_target=target)


def attack_setjmp_forgery(factory: MachineFactory, trials: int, seed: int = 0,
                          workers: int = 1) -> TrialReport:
    outs = run_trials(functools.partial(setjmp_forgery_trial, factory), trials, seed, workers)
    return TrialReport.from_outcomes("setjmp-forgery", outs,
                                     analytic_ref=2.0 ** -factory.layout.pac_bits)


def attack_sigreturn_forgery(factory: MachineFactory, trials: int, seed: int = 0,
                             workers: int = 1) -> TrialReport:
    outs = run_trials(functools.partial(sigreturn_forgery_trial, factory), trials, seed, workers)
    return TrialReport.from_outcomes("sigreturn-forgery", outs,
                                     analytic_ref=2.0 ** -factory.layout.pac_bits)


DEFAULT_PROGRAMS = {
    "reuse-sp": sibling_calls_program,
    "on-graph": recursive_loader_program,
    "off-graph-callsite": off_graph_program,
    "off-graph-arbitrary": off_graph_program,
    "fork-bruteforce": fork_server_program,
    "signing-gadget": tail_call_program,
    "setjmp-forgery": off_graph_program,
    "sigreturn-forgery": off_graph_program,
}
