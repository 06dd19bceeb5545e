"""Closed-form references: birthday bounds, guessing cost, violation table."""
from __future__ import annotations

import math
from fractions import Fraction

ON_GRAPH = "on_graph"
OFF_GRAPH_CALLSITE = "off_graph_callsite"
OFF_GRAPH_ARBITRARY = "off_graph_arbitrary"
VIOLATION_TYPES = (ON_GRAPH, OFF_GRAPH_CALLSITE, OFF_GRAPH_ARBITRARY)


def _check_qb(q, b):
    if b < 1:
        raise ValueError("b must be >= 1")
    if not 0 <= q <= 2 ** b:
        raise ValueError(f"q must be in [0, 2**{b}]")


def p_collision(q: int, b: int) -> float:
    """P[some pair among q uniform b-bit tokens collides], via the log-space product."""
    _check_qb(q, b)
    n = float(2 ** b)
    # 1 - prod(1 - i/N) = -expm1(sum log1p(-i/N))
    s = math.fsum(math.log1p(-i / n) for i in range(1, q))
    return -math.expm1(s)


def p_collision_exact(q: int, b: int) -> Fraction:
    """Exact rational 1 - N! / ((N-q)! N^q)."""
    _check_qb(q, b)
    n = 2 ** b
    num = 1
    for i in range(q):
        num *= n - i
    return 1 - Fraction(num, n ** q)


def expected_tokens_to_collision(b: int) -> float:
    if b < 1:
        raise ValueError("b must be >= 1")
    return math.sqrt(math.pi * 2 ** b / 2)


def birthday_moments(b: int):
    """Exact mean and variance of Q, the index of the first repeated token.

    E[Q] = sum_k P(Q > k) and E[Q^2] = sum_k (2k+1) P(Q > k), with
    P(Q > k) = prod_{i<k} (1 - i/N).
    """
    n = 2 ** b
    surv = 1.0
    m1 = 0.0
    m2 = 0.0
    for k in range(n + 1):
        m1 += surv
        m2 += (2 * k + 1) * surv
        surv *= 1 - k / n
        if surv == 0.0:
            break
    return m1, m2 - m1 * m1


def guesses_for_success(p: float, b: int) -> float:
    """Guesses needed to reach success probability ``p`` against a b-bit token."""
    if not 0 < p < 1:
        raise ValueError("p must be in (0, 1)")
    if b < 1:
        raise ValueError("b must be >= 1")
    return math.log1p(-p) / math.log1p(-(2.0 ** -b))


def violation_bound(violation_type: str, masked: bool, b: int) -> float:
    """Maximum success probability of a single call-stack violation attempt."""
    if violation_type == ON_GRAPH:
        return 2.0 ** -b if masked else 1.0
    if violation_type == OFF_GRAPH_CALLSITE:
        return 2.0 ** -b
    if violation_type == OFF_GRAPH_ARBITRARY:
        return 2.0 ** (-2 * b)
    raise ValueError(f"unknown violation type {violation_type!r}")


def fork_guess_means(b: int):
    """Mean sibling attempts for the two brute-force strategies.

    Two sequential geometric stages share their boundary attempt, so the
    divide-and-conquer mean is 2 * 2^b - 1; a joint guess needs 2^(2b).
    """
    return 2.0 * 2 ** b - 1, float(2 ** (2 * b))


FORMULAS = {
    "p_collision": lambda b, q=None, p=None: p_collision(_need(q, "q"), b),
    "expected_tokens": lambda b, q=None, p=None: expected_tokens_to_collision(b),
    "guesses_for_success": lambda b, q=None, p=None: guesses_for_success(_need(p, "p"), b),
    "birthday_mean": lambda b, q=None, p=None: birthday_moments(b)[0],
}


def _need(v, name):
    if v is None:
        raise ValueError(f"formula needs --{name}")
    return v


def evaluate(formula: str, b: int, q=None, p=None) -> float:
    try:
        f = FORMULAS[formula]
    except KeyError:
        raise ValueError(f"unknown formula {formula!r}; choose from {sorted(FORMULAS)}") from None
    return f(b, q=q, p=p)
