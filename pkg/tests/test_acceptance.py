"""The acceptance matrix, one test per criterion at its stated tolerance."""
import pytest

from acs_sim import acceptance

LINES = []


def _check(n):
    r = acceptance.CRITERIA[n]()
    LINES.append(r.line())
    print(r.line())
    assert r.passed, r.line()


@pytest.mark.slow
@pytest.mark.parametrize("n", [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12])
def test_criterion(n):
    _check(n)


def _sub(name):
    ok, detail = acceptance.analytic_checks()[name]
    line = f"criterion 11 {'PASS' if ok else 'FAIL'}  analytic oracle / {name}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


@pytest.mark.parametrize("name", ["p_collision(2,1)", "guesses_for_success(0.5,16)",
                                  "log-space vs exact"])
def test_criterion_11(name):
    _sub(name)


@pytest.mark.xfail(strict=True, reason="sqrt(pi*2^16/2) = 320.848; the stated 320.75 +- 0.01 "
                                       "is unreachable with the closed form (see README)")
def test_criterion_11_expected_tokens():
    _sub("expected_tokens(16)")
