"""Trial bookkeeping, per-trial RNG streams and aggregate reports."""
from __future__ import annotations

import hashlib
import math
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

from scipy import stats as _st


def trial_seed(master: int, index: int) -> int:
    d = hashlib.blake2b(b"trial:%d:%d" % (master, index), digest_size=8).digest()
    return int.from_bytes(d, "little")


def trial_rng(master: int, index: int) -> random.Random:
    """Independent, reproducible stream for trial ``index``."""
    return random.Random(trial_seed(master, index))


@dataclass
class AttackOutcome:
    success: bool = False
    ag_load: bool = False
    crashed: bool = False
    guesses_used: int = 0
    tokens_harvested: int = 0
    hijack_target: Optional[int] = None
    info: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.success and not self.ag_load:
            raise ValueError("a hijack implies a validated substitution")
        if self.success and self.crashed:
            raise ValueError("a trial cannot both succeed and crash")


def _run_chunk(args):
    fn, seed, lo, hi = args
    return [fn(trial_rng(seed, i), i) for i in range(lo, hi)]


def run_trials(fn: Callable[[random.Random, int], AttackOutcome], trials: int, seed: int,
               workers: int = 1) -> List[AttackOutcome]:
    """Run ``fn(rng, index)`` for every trial; the result order (and content)
    does not depend on ``workers``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if workers <= 1:
        return [fn(trial_rng(seed, i), i) for i in range(trials)]
    step = max(1, -(-trials // (workers * 4)))
    chunks = [(fn, seed, lo, min(trials, lo + step)) for lo in range(0, trials, step)]
    out: List[AttackOutcome] = []
    with ProcessPoolExecutor(max_workers=workers) as ex:
        for part in ex.map(_run_chunk, chunks):
            out.extend(part)
    return out


def wilson_interval(k: int, n: int, level: float = 0.95):
    if n == 0:
        return 0.0, 1.0
    z = float(_st.norm.ppf(0.5 + level / 2))
    p = k / n
    den = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / den
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / den
    return max(0.0, centre - half), min(1.0, centre + half)


def _mean_sd(xs: Sequence[float]):
    if not xs:
        return None, None
    m = sum(xs) / len(xs)
    if len(xs) < 2:
        return m, None
    return m, math.sqrt(sum((x - m) ** 2 for x in xs) / (len(xs) - 1))


@dataclass
class TrialReport:
    name: str
    n_trials: int
    successes: int
    crashes: int
    ag_loads: int
    rate: float
    ci_low: float
    ci_high: float
    ci_degenerate: bool
    mean_guesses: Optional[float]
    sd_guesses: Optional[float]
    mean_harvested: Optional[float]
    sd_harvested: Optional[float]
    analytic_ref: Optional[float] = None
    compare: str = "rate"  # or "mean_harvested" / "mean_guesses" / "none"
    tolerance: float = 3.0
    verdict: Optional[bool] = None
    extra: Dict[str, object] = field(default_factory=dict)

    @classmethod
    def from_outcomes(cls, name: str, outcomes: Sequence[AttackOutcome],
                      analytic_ref: Optional[float] = None, compare: str = "rate",
                      tolerance: Optional[float] = None, level: float = 0.95,
                      extra: Optional[dict] = None) -> "TrialReport":
        """Aggregate outcomes. Rates are judged within ``tolerance`` binomial
        standard errors of the analytic value (default 3), means within a
        relative ``tolerance`` (default 5%)."""
        n = len(outcomes)
        k = sum(o.success for o in outcomes)
        lo, hi = wilson_interval(k, n, level)
        g_m, g_sd = _mean_sd([o.guesses_used for o in outcomes])
        h_m, h_sd = _mean_sd([o.tokens_harvested for o in outcomes])
        if tolerance is None:
            tolerance = 3.0 if compare == "rate" else 0.05
        rep = cls(name=name, n_trials=n, successes=k,
                  crashes=sum(o.crashed for o in outcomes),
                  ag_loads=sum(o.ag_load for o in outcomes),
                  rate=k / n if n else 0.0, ci_low=lo, ci_high=hi, ci_degenerate=n < 2,
                  mean_guesses=g_m, sd_guesses=g_sd, mean_harvested=h_m, sd_harvested=h_sd,
                  analytic_ref=analytic_ref, compare=compare, tolerance=tolerance,
                  extra=dict(extra or {}))
        rep.verdict = rep.judge()
        return rep

    def judge(self) -> Optional[bool]:
        ref = self.analytic_ref
        if ref is None or self.compare == "none":
            return None
        if self.compare == "rate":
            return rate_within(self.successes, self.n_trials, ref, self.tolerance)
        value = getattr(self, self.compare)
        if value is None:
            return False
        return abs(value - ref) <= self.tolerance * abs(ref)

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in (
            "name", "n_trials", "successes", "crashes", "ag_loads", "rate", "ci_low",
            "ci_high", "ci_degenerate", "mean_guesses", "sd_guesses", "mean_harvested",
            "sd_harvested", "analytic_ref", "compare", "tolerance", "verdict")}
        d.update(self.extra)
        return d


def binomial_se(p: float, n: int) -> float:
    return math.sqrt(p * (1 - p) / n)


def rate_within(k: int, n: int, p: float, k_se: float = 3.0) -> bool:
    """|k/n - p| within ``k_se`` standard errors of the analytic ``p``
    (exact match required when ``p`` is 0 or 1)."""
    if n == 0:
        return False
    if p <= 0.0 or p >= 1.0:
        return k / n == p
    return abs(k / n - p) <= k_se * binomial_se(p, n)
