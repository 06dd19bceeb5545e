"""Benign executions: random well-formed traces and irregular-unwind round trips."""
from __future__ import annotations

import random
from typing import List

from .machine import (Call, DoCall, DoLongJmp, DoReturn, DoSetJmp, DoSignal, DoSigReturn,
                      LongJmp, Machine, Return, Scheme, SigReturn)
from .pac import DEFAULT_LAYOUT, PointerLayout
from .program import CallGraphProgram, random_program


def random_trace(program: CallGraphProgram, rng: random.Random, steps: int = 40,
                 max_depth: int = 12, irregular: bool = True) -> list:
    """A well-formed action list over ``program`` (calls follow real call
    sites, returns match calls, longjmps target live setjmps)."""
    cur = program.entry
    stack: List[tuple] = []  # (caller fn, frame uid)
    uid = 0
    jumps = []   # (stack snapshot, fn, signal epoch)
    sigs = []
    epoch = ()
    out = []
    for _ in range(steps):
        sites = program.fn(cur).call_sites
        r = rng.random()
        if sites and len(stack) < max_depth and r < 0.5:
            k = rng.randrange(len(sites))
            out.append(DoCall(k))
            uid += 1
            stack.append((cur, uid))
            cur = sites[k].callee
        elif stack and r < 0.8 and (not sigs or len(stack) > len(sigs[-1][0])):
            out.append(DoReturn())
            cur = stack.pop()[0]
        elif irregular and r < 0.86 and len(jumps) < 8:
            out.append(DoSetJmp())
            jumps.append((list(stack), cur, epoch))
        elif irregular and r < 0.9 and jumps:
            # never jump across a pending signal frame
            live = [i for i, (s, _, e) in enumerate(jumps) if stack[:len(s)] == s and e == epoch]
            if live:
                i = rng.choice(live)
                out.append(DoLongJmp(i))
                stack = list(jumps[i][0])
                cur = jumps[i][1]
        elif irregular and r < 0.95 and len(sigs) < 3:
            out.append(DoSignal(None))
            sigs.append((list(stack), cur))
            epoch = epoch + (len(out),)
        elif irregular and sigs and stack == sigs[-1][0]:
            out.append(DoSigReturn())
            cur = sigs.pop()[1]
            epoch = epoch[:-1]
    return out


def control_flow(events) -> list:
    """The events that a benign run must reproduce under every scheme."""
    return [e for e in events if isinstance(e, (Call, Return, LongJmp, SigReturn))]


def _deep_walk(m: Machine, rng: random.Random, depth: int) -> int:
    n = 0
    while n < depth:
        sites = m.program.fn(m.current_fn).call_sites
        if not sites:
            break
        if not isinstance(m.call_site(rng.randrange(len(sites))), Call):
            break
        n += 1
    return n


def setjmp_roundtrip(rng: random.Random, scheme="acs-full",
                     layout: PointerLayout = DEFAULT_LAYOUT) -> bool:
    """Random program: setjmp, descend further, longjmp back, unwind cleanly."""
    prog = random_program(rng, rng.randint(3, 10), 3)
    m = Machine(prog, scheme, layout, rng.getrandbits(32), seed_init=rng.getrandbits(64))
    _deep_walk(m, rng, rng.randint(0, 6))
    depth0, cr0 = m.depth, m.cr
    buf = m.do_setjmp()
    expect = m.trace[-1].ret_addr
    _deep_walk(m, rng, rng.randint(0, 6))
    ev = m.do_longjmp(buf)
    if not (isinstance(ev, LongJmp) and ev.to_addr == expect):
        return False
    if m.depth != depth0 or m.cr != cr0:
        return False
    while m.depth:
        if not isinstance(m.do_return(), Return):
            return False
    return not m.halted and (not m.scheme.is_acs or m.cr == m.seed_init)


def nested_signals(rng: random.Random, scheme="acs-full", layout: PointerLayout = DEFAULT_LAYOUT,
                   max_nesting: int = 3) -> bool:
    """Deliver up to ``max_nesting`` nested signals, with handlers that make
    calls of their own, then return from each in turn."""
    prog = random_program(rng, rng.randint(3, 10), 3)
    m = Machine(prog, scheme, layout, rng.getrandbits(32), seed_init=rng.getrandbits(64))
    _deep_walk(m, rng, rng.randint(0, 5))
    frames = []
    for _ in range(rng.randint(1, max_nesting)):
        frames.append((m.signal_deliver(), m.trace[-1].pc))
        n = _deep_walk(m, rng, rng.randint(0, 3))
        for _ in range(n):
            if not isinstance(m.do_return(), Return):
                return False
    while frames:
        frame, pc = frames.pop()
        ev = m.sigreturn(frame)
        if not (isinstance(ev, SigReturn) and ev.to_addr == pc):
            return False
    while m.depth:
        if not isinstance(m.do_return(), Return):
            return False
    return not m.halted and (not m.scheme.is_acs or m.cr == m.seed_init)


def run_everywhere(program: CallGraphProgram, actions, layout: PointerLayout = DEFAULT_LAYOUT,
                   key_seed: int = 0, seed_init: int = 0) -> dict:
    """Run one benign trace under every scheme; scheme -> control-flow events."""
    out = {}
    for s in Scheme:
        m = Machine(program, s, layout, key_seed, seed_init=seed_init)
        out[s] = control_flow(m.run_trace(actions))
    return out
