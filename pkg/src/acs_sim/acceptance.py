"""The acceptance matrix. Each check returns a ``Result``; ``run_all`` prints
one PASS/FAIL line per check.

Every check uses its own fixed master seed (its number), chosen up front.
"""
from __future__ import annotations

import math
import random
import time
from dataclasses import dataclass
from decimal import Decimal, getcontext

from scipy import stats as _st

from . import analytics, attacks, workloads
from .attacks import MachineFactory
from .machine import Machine, Return, Scheme
from .pac import PacKey, PointerLayout, aut, is_canonical, mac_token, pac_add
from .program import random_program
from .stats import rate_within, trial_rng

L16 = PointerLayout(39, 16)
L8 = PointerLayout(39, 8)
L4 = PointerLayout(39, 4)

FORK_TRIALS = 10_000
PROPERTY_CASES = 10_000


@dataclass
class Result:
    number: int
    title: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"criterion {self.number:2d} {'PASS' if self.passed else 'FAIL'}  {self.title}: {self.detail}"


def _fac(name, scheme="acs-full", layout=L16, **kw):
    return MachineFactory(attacks.DEFAULT_PROGRAMS[name](), Scheme.parse(scheme), layout, **kw)


def _rate_detail(rep, ref):
    se = math.sqrt(ref * (1 - ref) / rep.n_trials)
    return f"{rep.successes}/{rep.n_trials} = {rep.rate:.5f} (ref {ref:.5f}, 3 SE = {3 * se:.5f})"


def birthday_harvest() -> Result:
    t0 = time.perf_counter()
    rep = attacks.attack_on_graph(_fac("on-graph", "acs-nomask"), False, None, 1000, seed=1)
    dt = time.perf_counter() - t0
    ref = analytics.expected_tokens_to_collision(16)
    ok = abs(rep.mean_harvested - ref) <= 0.05 * ref and dt < 30
    return Result(1, "birthday harvest", ok,
                  f"mean {rep.mean_harvested:.2f} vs {ref:.2f} (+-5%), {dt:.1f} s")


def unmasked_replay() -> Result:
    rep = attacks.attack_on_graph(_fac("on-graph", "acs-nomask"), False, None, 200, seed=2)
    found = rep.extra["collisions_found"]
    rate = rep.extra["replay_success_rate"]
    ok = found == 200 and rate == 1.0
    return Result(2, "unmasked on-graph replay", ok, f"{found} collisions, hijack rate {rate}")


def masked_on_graph() -> Result:
    rep = attacks.attack_on_graph(_fac("on-graph", layout=L8), True, None, 100_000, seed=3)
    ref = 2.0 ** -8
    return Result(3, "masked on-graph", rate_within(rep.successes, rep.n_trials, ref),
                  _rate_detail(rep, ref))


def off_graph_call_site() -> Result:
    rep = attacks.attack_off_graph(_fac("off-graph-callsite", layout=L8), "call_site", 100_000, 4)
    ref = 2.0 ** -8
    silent = rep.extra["failures_without_crash"]
    ok = rate_within(rep.successes, rep.n_trials, ref) and silent == 0
    return Result(4, "off-graph to call site", ok,
                  _rate_detail(rep, ref) + f", failures without crash {silent}")


def off_graph_arbitrary() -> Result:
    rep = attacks.attack_off_graph(_fac("off-graph-arbitrary", layout=L4), "arbitrary", 100_000, 5)
    ref = 2.0 ** -8
    return Result(5, "off-graph to arbitrary address", rate_within(rep.successes, rep.n_trials, ref),
                  _rate_detail(rep, ref))


def sp_modifier_reuse() -> Result:
    sp = attacks.attack_reuse_sp_modifier(_fac("reuse-sp", "sp-modifier"), 1000, 6)
    acs = attacks.attack_reuse_sp_modifier(_fac("reuse-sp", layout=L8), 20_000, 6)
    sh = attacks.attack_reuse_sp_modifier(_fac("reuse-sp", "shadow-stack"), 1000, 6)
    ref = 2.0 ** -8
    ok = sp.rate == 1.0 and sh.rate == 0.0 and rate_within(acs.successes, acs.n_trials, ref)
    return Result(6, "SP-modifier reuse", ok,
                  f"sp-modifier {sp.rate}, acs-full(b=8) {acs.rate:.5f} (ref {ref:.5f}), "
                  f"shadow-stack {sh.rate}")


def fork_bruteforce(trials: int = FORK_TRIALS) -> Result:
    fac = _fac("fork-bruteforce", layout=L4, process_model="lenient")
    plain = attacks.attack_fork_bruteforce(fac, False, None, trials, 7)
    fresh = attacks.attack_fork_bruteforce(fac, True, None, trials, 7)
    ratio = fresh.mean_guesses / plain.mean_guesses
    ok = 8 <= ratio <= 32 and plain.successes == fresh.successes == trials
    return Result(7, "fork brute force", ok,
                  f"reseeded {fresh.mean_guesses:.1f} / non-reseeded {plain.mean_guesses:.2f} "
                  f"= {ratio:.2f} (window [8, 32])")


def signing_gadget() -> Result:
    rep = attacks.attack_signing_gadget(_fac("signing-gadget"), 1000, 8)
    x = rep.extra
    ok = x["primitive_exact_flips"] == x["primitive_trials"] == 10_000 and x["detection_rate"] == 1.0
    return Result(8, "signing gadget", ok,
                  f"stage 1 {x['primitive_exact_flips']}/{x['primitive_trials']} exact single-bit flips, "
                  f"stage 2 detected {x['detected']}/{x['gadget_invocations']}")


def setjmp_longjmp() -> Result:
    benign = sum(workloads.setjmp_roundtrip(trial_rng(9, i)) for i in range(1000))
    rep = attacks.attack_setjmp_forgery(_fac("setjmp-forgery", layout=L8), 100_000, 9)
    ref = 2.0 ** -8
    ok = benign == 1000 and rate_within(rep.successes, rep.n_trials, ref)
    return Result(9, "setjmp/longjmp", ok, f"benign {benign}/1000, forged " + _rate_detail(rep, ref))


def sigreturn_chain() -> Result:
    benign = sum(workloads.nested_signals(trial_rng(10, i)) for i in range(1000))
    rep = attacks.attack_sigreturn_forgery(_fac("sigreturn-forgery", layout=L8), 100_000, 10)
    ref = 2.0 ** -8
    ok = benign == 1000 and rate_within(rep.successes, rep.n_trials, ref)
    return Result(10, "sigreturn chain", ok, f"benign {benign}/1000, forged " + _rate_detail(rep, ref))


def _guesses_decimal(p, b):
    getcontext().prec = 60
    one = Decimal(1)
    return (one - Decimal(p)).ln() / (one - one / Decimal(2 ** b)).ln()


def analytic_checks() -> dict:
    """name -> (passed, detail) for the closed-form checks."""
    out = {}
    v = analytics.p_collision(2, 1)
    out["p_collision(2,1)"] = (v == 0.5, f"{v!r}")
    e = analytics.expected_tokens_to_collision(16)
    out["expected_tokens(16)"] = (abs(e - 320.75) <= 0.01, f"{e:.4f} vs 320.75 +- 0.01")
    g = analytics.guesses_for_success(0.5, 16)
    ref = float(_guesses_decimal("0.5", 16))
    out["guesses_for_success(0.5,16)"] = (f"{g:.6g}" == f"{ref:.6g}", f"{g:.6g} vs {ref:.6g}")
    worst = 0.0
    for b in range(1, 9):
        for q in range(0, 2 ** b + 1):
            worst = max(worst, abs(analytics.p_collision(q, b) - float(analytics.p_collision_exact(q, b))))
    out["log-space vs exact"] = (worst <= 1e-12, f"max error {worst:.1e}")
    return out


def analytic_oracle() -> Result:
    checks = analytic_checks()
    detail = "; ".join(f"{k} {d}{'' if ok else ' [FAIL]'}" for k, (ok, d) in checks.items())
    return Result(11, "analytic oracle", all(ok for ok, _ in checks.values()), detail)


def _prop_roundtrip(rng):
    va = rng.randint(24, 48)
    lay = PointerLayout(va, rng.randint(1, min(24, 62 - va)))
    key = PacKey.generate(rng)
    ptr = rng.getrandbits(lay.va_size)
    mod = rng.getrandbits(64)
    return aut(key, lay, pac_add(key, lay, ptr, mod), mod) == ptr


def _prop_tamper(rng):
    lay = PointerLayout(39, rng.randint(1, 23))
    key = PacKey.generate(rng)
    ptr = rng.getrandbits(lay.va_size)
    mod = rng.getrandbits(64)
    w = pac_add(key, lay, ptr, mod)
    bit = lay.pac_lo + rng.randrange(lay.pac_bits)
    return not is_canonical(lay, aut(key, lay, w ^ (1 << bit), mod))


def _prop_noninterference(rng):
    prog = random_program(rng, rng.randint(2, 8), 3)
    acts = workloads.random_trace(prog, rng, 30)
    res = workloads.run_everywhere(prog, acts, key_seed=rng.getrandbits(32),
                                   seed_init=rng.getrandbits(64))
    first = res[Scheme.UNINSTRUMENTED]
    return all(v == first for v in res.values())


def _prop_chain_sound(rng):
    prog = random_program(rng, rng.randint(2, 8), 3)
    acts = workloads.random_trace(prog, rng, 30, irregular=False)
    for s in (Scheme.ACS_NOMASK, Scheme.ACS_FULL):
        m = Machine(prog, s, L16, rng.getrandbits(32), seed_init=rng.getrandbits(64))
        m.run_trace(acts)
        while m.depth:
            if not isinstance(m.do_return(), Return):
                return False
        if m.halted or m.cr != m.seed_init:
            return False
    return True


def mask_independence_pvalue(samples: int = 100_000, seed: int = 12, b: int = 4) -> float:
    """2x2 chi-square p-value: equal stored (masked) tokens vs equal unmasked
    tokens, for one return address under two independent predecessors."""
    rng = random.Random(seed)
    lay = PointerLayout(39, b)
    table = [[0, 0], [0, 0]]
    for _ in range(samples):
        key = PacKey.generate(rng)
        ret = rng.getrandbits(lay.va_size)
        y1, y2 = rng.getrandbits(64), rng.getrandbits(64)
        u1, u2 = mac_token(key, ret, y1, lay), mac_token(key, ret, y2, lay)
        m1 = u1 ^ mac_token(key, 0, y1, lay)
        m2 = u2 ^ mac_token(key, 0, y2, lay)
        table[u1 == u2][m1 == m2] += 1
    return float(_st.chi2_contingency(table, correction=False)[1])


def invariant_suite(cases: int = PROPERTY_CASES) -> Result:
    checks = {"round-trip": _prop_roundtrip, "tamper": _prop_tamper,
              "non-interference": _prop_noninterference, "chain soundness": _prop_chain_sound}
    bad = {}
    for k, (name, fn) in enumerate(checks.items()):
        rng = random.Random(12_000 + k)
        bad[name] = sum(not fn(rng) for _ in range(cases))
    p = mask_independence_pvalue()
    ok = not any(bad.values()) and p > 0.01
    detail = ", ".join(f"{n} {cases - v}/{cases}" for n, v in bad.items())
    return Result(12, "invariant suite", ok, f"{detail}, mask-independence p = {p:.3f}")


CRITERIA = {1: birthday_harvest, 2: unmasked_replay, 3: masked_on_graph, 4: off_graph_call_site,
            5: off_graph_arbitrary, 6: sp_modifier_reuse, 7: fork_bruteforce, 8: signing_gadget,
            9: setjmp_longjmp, 10: sigreturn_chain, 11: analytic_oracle, 12: invariant_suite}


def run_all(only=None) -> bool:
    ok = True
    for n, fn in CRITERIA.items():
        if only and n not in only:
            continue
        r = fn()
        print(r.line(), flush=True)
        ok &= r.passed
    return ok
