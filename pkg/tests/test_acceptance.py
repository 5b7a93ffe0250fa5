"""Acceptance gate: every criterion at its pinned tolerance, full suite.

Run with -s to see the one-line verdicts as they complete.
"""

import pytest

from expanderlab.acceptance import run_acceptance

RUNTIME_BOUNDS = {1: 1.0, 2: 10.0, 3: 60.0, 5: 30.0}


@pytest.fixture(scope="module")
def results():
    out = {}
    for res in run_acceptance("full", printer=None):
        out[res.number] = res
    return out


@pytest.mark.parametrize("number", sorted(RUNTIME_BOUNDS) + [4, 6, 7, 8, 9, 10])
def test_criterion(results, number):
    res = results[number]
    print(res.line())
    assert res.passed, res.line()
    if number in RUNTIME_BOUNDS:
        assert res.elapsed < RUNTIME_BOUNDS[number], (
            f"criterion {number} took {res.elapsed:.1f}s"
        )


def test_full_suite_wall_time(results):
    total = sum(r.elapsed for r in results.values())
    print(f"full suite wall time: {total:.1f} s")
    assert total < 300.0


def test_sign_flipped_rate_is_caught(monkeypatch):
    # negative control: corrupting the sign of the monotonicity rate must
    # break the finite-difference cross-check
    import expanderlab.acceptance as acc

    true_rate = acc.expander_residual

    def flipped(m, u, sigma):
        return -true_rate(m, u, sigma)

    monkeypatch.setattr(acc, "expander_residual", flipped)
    res = acc.crit_4_rate_cross_check(acc._Artifacts("fast"))
    assert not res.passed


def test_fast_suite_also_passes():
    results = run_acceptance("fast", printer=None)
    assert all(r.passed for r in results)
    assert sum(r.elapsed for r in results) < 120.0
