import math
from fractions import Fraction
from itertools import product

import mpmath
import pytest

from acs_sim import analytics as A


def test_p_collision_small_values():
    assert A.p_collision(2, 1) == 0.5
    assert A.p_collision(0, 5) == 0.0
    for b in range(1, 20):
        assert A.p_collision(1, b) == 0.0
    assert A.p_collision(2 ** 3, 3) < 1.0


def test_exact_matches_log_space_for_small_b():
    for b in range(1, 9):
        for q in range(0, 2 ** b + 1):
            assert abs(A.p_collision(q, b) - float(A.p_collision_exact(q, b))) <= 1e-12


def test_exact_rational_by_enumeration():
    # brute force over all q-tuples of b-bit tokens
    for b, q in [(1, 2), (2, 2), (2, 3), (3, 2), (2, 4)]:
        n = 2 ** b
        hits = sum(len(set(t)) < q for t in product(range(n), repeat=q))
        assert A.p_collision_exact(q, b) == Fraction(hits, n ** q)


def test_p_collision_monotone_in_q():
    for b in (4, 8, 16):
        vals = [A.p_collision(q, b) for q in range(0, min(2 ** b, 2000) + 1)]
        assert all(x <= y for x, y in zip(vals, vals[1:]))


@pytest.mark.parametrize("q,b", [(-1, 4), (17, 4), (1, 0)])
def test_p_collision_range_errors(q, b):
    with pytest.raises(ValueError):
        A.p_collision(q, b)


def test_expected_tokens():
    assert A.expected_tokens_to_collision(1) == pytest.approx(math.sqrt(math.pi), abs=1e-3)
    assert round(A.expected_tokens_to_collision(16)) == 321
    for b in range(1, 40):
        assert A.expected_tokens_to_collision(b + 2) / A.expected_tokens_to_collision(b) == 2
        assert A.expected_tokens_to_collision(b + 1) > A.expected_tokens_to_collision(b)


def test_birthday_moments_against_fractions():
    for b in range(1, 7):
        n = 2 ** b
        surv = Fraction(1)
        m1 = m2 = Fraction(0)
        for k in range(n + 1):
            m1 += surv
            m2 += (2 * k + 1) * surv
            surv *= 1 - Fraction(k, n)
        mean, var = A.birthday_moments(b)
        assert mean == pytest.approx(float(m1), rel=1e-12)
        assert var == pytest.approx(float(m2 - m1 * m1), rel=1e-9)
    mean16, _ = A.birthday_moments(16)
    # Ramanujan: E[Q] = sqrt(pi N / 2) + 2/3 + O(N^-1/2)
    assert mean16 == pytest.approx(A.expected_tokens_to_collision(16) + 2 / 3, abs=0.01)


def test_guesses_against_mpmath():
    mpmath.mp.dps = 50
    for p, b in [(0.5, 16), (0.9, 8), (1e-6, 20), (0.999, 4)]:
        ref = mpmath.log(1 - mpmath.mpf(p)) / mpmath.log(1 - mpmath.mpf(2) ** -b)
        assert A.guesses_for_success(p, b) == pytest.approx(float(ref), rel=1e-12)
    assert f"{A.guesses_for_success(0.5, 16):.6g}" == "45425.7"
    assert A.guesses_for_success(0.5, 1) == 1.0
    p = 1e-9
    assert A.guesses_for_success(p, 16) == pytest.approx(p * 2 ** 16, rel=1e-4)


@pytest.mark.parametrize("p", [0, 1, -0.5, 2])
def test_guesses_domain(p):
    with pytest.raises(ValueError):
        A.guesses_for_success(p, 8)


def test_violation_table():
    assert A.violation_bound(A.ON_GRAPH, False, 16) == 1.0
    assert A.violation_bound(A.ON_GRAPH, True, 16) == 2 ** -16
    assert A.violation_bound(A.OFF_GRAPH_CALLSITE, True, 8) == 2 ** -8
    for masked in (False, True):
        assert A.violation_bound(A.OFF_GRAPH_ARBITRARY, masked, 4) == 2 ** -8
    with pytest.raises(ValueError):
        A.violation_bound("sideways", True, 8)


def test_fork_means():
    assert A.fork_guess_means(4) == (31.0, 256.0)


def test_formula_registry():
    assert A.evaluate("p_collision", 1, q=2) == 0.5
    assert A.evaluate("birthday_mean", 4) == A.birthday_moments(4)[0]
    with pytest.raises(ValueError):
        A.evaluate("p_collision", 8)
    with pytest.raises(ValueError):
        A.evaluate("nope", 8)
