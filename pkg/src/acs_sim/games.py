"""Monte Carlo runners for the collision-finding and call-stack security games."""
from __future__ import annotations

import functools
import random
from typing import Optional

from . import analytics
from .pac import DEFAULT_LAYOUT, PacKey, PointerLayout, mix64_mac
from .program import CallGraphProgram, recursive_loader_program
from .stats import AttackOutcome, TrialReport, run_trials


class _OutOfQueries(Exception):
    pass


class _Oracle:
    """Token oracle T(x, y) = H(x, y) xor H(0, y), or plain H when unmasked."""

    def __init__(self, key: PacKey, bits: int, masked: bool):
        self.key = key
        self.bits = bits
        self.masked = masked

    def H(self, x: int, y: int) -> int:
        return mix64_mac(self.key, x, y, self.bits)

    def T(self, x: int, y: int) -> int:
        t = self.H(x, y)
        if self.masked:
            t ^= self.H(0, y)
        return t


# ---------------------------------------------------------------------------
# collision finding given (masked) tokens
# ---------------------------------------------------------------------------

def _fresh_pair(rng, width, avoid):
    while True:
        y, y2 = rng.getrandbits(width), rng.getrandbits(width)
        if y != y2 and y not in avoid and y2 not in avoid:
            return y, y2


def collision_trial(layout: PointerLayout, q: int, masked: bool, adversary: str,
                    rng: random.Random, index: int = 0) -> AttackOutcome:
    b = layout.pac_bits
    width = layout.va_size + b
    orc = _Oracle(PacKey.generate(rng), b, masked)
    x = rng.getrandbits(layout.va_size) or 1
    queried = set()
    if adversary == "heuristic":
        seen = {}
        guess = None
        for _ in range(q):
            y = rng.getrandbits(width)
            while y in queried:
                y = rng.getrandbits(width)
            queried.add(y)
            t = orc.T(x, y)
            if t in seen and guess is None:
                guess = (seen[t], y)
            seen.setdefault(t, y)
        if guess is None:
            # no equal responses: any queried pair is (unmasked) known not to
            # collide, so fall back to an unqueried pair
            guess = _fresh_pair(rng, width, queried)
    elif adversary == "random":
        guess = _fresh_pair(rng, width, ())
    else:
        raise ValueError(f"unknown adversary {adversary!r}")
    y, y2 = guess
    win = y != y2 and orc.H(x, y) == orc.H(x, y2)
    return AttackOutcome(success=win, ag_load=win, guesses_used=1, tokens_harvested=q)


def collision_win_probability(q: int, b: int, masked: bool, adversary: str) -> float:
    base = 2.0 ** -b
    if adversary == "random" or masked:
        return base
    p = analytics.p_collision(q, b)
    return p + (1 - p) * base


def game_pac_collision(layout: PointerLayout, q: int, masked: bool, trials: int, seed: int = 0,
                       adversary: str = "heuristic", workers: int = 1) -> TrialReport:
    b = layout.pac_bits
    if not 0 <= q <= 2 ** b:
        raise ValueError("q out of range")
    fn = functools.partial(collision_trial, layout, q, masked, adversary)
    outs = run_trials(fn, trials, seed, workers)
    ref = collision_win_probability(q, b, masked, adversary)
    rep = TrialReport.from_outcomes("pac-collision", outs, analytic_ref=ref,
                                    extra={"masked": masked, "q": q, "adversary": adversary})
    rep.extra["advantage"] = rep.rate - 2.0 ** -b
    return rep


# ---------------------------------------------------------------------------
# the call-stack game
# ---------------------------------------------------------------------------

def _paths_to(program: CallGraphProgram, ret_site: int, limit: int, max_len: int = 24):
    """Up to ``limit`` distinct return-site paths from the entry ending at
    ``ret_site``, shortest first."""
    edges = {}
    for a, b in program.edges():
        edges.setdefault(a, []).append(b)
    for v in edges.values():
        v.sort()
    starts = sorted(cs.ret_addr for cs in program.fn(program.entry).call_sites)
    out = []
    frontier = [[s] for s in starts]
    while frontier and len(out) < limit:
        nxt = []
        for p in frontier:
            if p[-1] == ret_site:
                out.append(p)
                if len(out) >= limit:
                    break
            if len(p) < max_len:
                nxt.extend(p + [r] for r in edges.get(p[-1], ()))
        frontier = nxt
    return out


def _collision_site(program: CallGraphProgram):
    """The return site reached by the most distinct paths (ties: lowest)."""
    counts = {r: len(_paths_to(program, r, 64, 12)) for r in sorted(program.return_sites())}
    return max(counts, key=lambda r: (counts[r], -r))


def acs_trial(program: CallGraphProgram, layout: PointerLayout, q: int, masked: bool,
              adversary: str, target_site: Optional[int], rng: random.Random,
              index: int = 0) -> AttackOutcome:
    b = layout.pac_bits
    lo = layout.pac_lo
    orc = _Oracle(PacKey.generate(rng), b, masked)
    edges = program.edges()
    starts = {cs.ret_addr for cs in program.fn(program.entry).call_sites}

    def oracle(path):
        if path[0] not in starts or any((a, c) not in edges for a, c in zip(path, path[1:])):
            return None
        word = 0
        for r in path:
            word = (orc.T(r, word) << lo) | r
        return word

    if adversary == "offgraph":
        sites = sorted(program.return_sites())
        bad = None
        for a in sites:
            for c in sites:
                if (a, c) not in edges:
                    bad = [a, c]
                    break
            if bad:
                break
        if bad is None or oracle(bad) is not None:
            raise ValueError("program has no off-graph pair")
        return AttackOutcome(guesses_used=1, tokens_harvested=0)

    if adversary == "blind" or q == 0:
        # T(0, y) is the all-zero token under masking, so (0, 0) is accepted
        # as a validly tagged word for any t_adv; only the jump check remains
        sites = sorted(program.return_sites())
        jumper = rng.choice(sites)
        correct = (rng.getrandbits(b) << lo) | rng.choice(sites)
        t_adv = rng.getrandbits(lo + b)
        adv = 0 if masked else (rng.getrandbits(b) << lo)
        valid = (adv >> lo) == orc.T(adv & layout.addr_mask, t_adv)
        win = correct != adv and valid and orc.H(jumper, correct) == orc.H(jumper, adv)
        return AttackOutcome(success=win, ag_load=win, guesses_used=1)

    if adversary != "best":
        raise ValueError(f"unknown adversary {adversary!r}")
    # Query paths that end one step before a common return site ``r``; each
    # answer is a valid predecessor word for the jump check at ``r``, and the
    # answer for the path extended by ``r`` exposes its (masked) token there.
    r = target_site if target_site is not None else _collision_site(program)
    answers = {}

    def ask(path):
        key = tuple(path)
        if key not in answers:
            if len(answers) >= q:
                raise _OutOfQueries
            answers[key] = oracle(path)
        return answers[key]

    words = []
    seen = {}
    pick = None
    try:
        for p in _paths_to(program, r, q + 1, 64):
            pred = p[:-1]
            if not pred:
                continue
            t_prev = ask(pred[:-1]) if len(pred) > 1 else 0
            w = ask(pred)
            tok = ask(p) >> lo
            words.append((w, t_prev))
            if tok in seen and seen[tok][0] != w:
                pick = (seen[tok], (w, t_prev))
                break
            seen.setdefault(tok, (w, t_prev))
    except _OutOfQueries:
        pass
    if pick is None and len(words) >= 2:
        i, j = rng.sample(range(len(words)), 2)
        pick = (words[i], words[j])
    if pick is None:
        return AttackOutcome(guesses_used=1, tokens_harvested=len(words))
    (wc, tc), (wa, ta) = pick
    if wc == wa:
        return AttackOutcome(guesses_used=1, tokens_harvested=len(words))
    valid = (wa >> lo) == orc.T(wa & layout.addr_mask, ta)
    win = valid and orc.H(r, wc) == orc.H(r, wa)
    return AttackOutcome(success=win, ag_load=win, guesses_used=1, tokens_harvested=len(words))


def game_acs(program: Optional[CallGraphProgram] = None, q: int = 16, trials: int = 1000,
             seed: int = 0, layout: PointerLayout = DEFAULT_LAYOUT, masked: bool = True,
             adversary: str = "best", workers: int = 1) -> TrialReport:
    """Estimate the call-stack game's win rate; the bound is 2^-b with masking."""
    program = program or recursive_loader_program()
    b = layout.pac_bits
    site = _collision_site(program) if adversary == "best" and q > 0 else None
    fn = functools.partial(acs_trial, program, layout, q, masked, adversary, site)
    outs = run_trials(fn, trials, seed, workers)
    if adversary == "offgraph":
        ref = 0.0
    elif masked or q == 0 or adversary == "blind":
        ref = 2.0 ** -b if masked else 2.0 ** (-2 * b)
    else:
        ref = None
    rep = TrialReport.from_outcomes("acs", outs, analytic_ref=ref,
                                    extra={"masked": masked, "q": q, "adversary": adversary,
                                           "bound": 2.0 ** -b})
    if ref is None:
        rep.compare = "none"
        rep.verdict = None
    return rep
