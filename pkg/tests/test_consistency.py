import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import comb

from parpow.consistency import (
    ConsistencyParams,
    InsecureRegimeError,
    Pmf,
    consistency_curve,
    convolve,
    geometric_lead_pmf,
    monte_carlo_bound,
    negbin_pmf,
    poisson_sum_pmf,
    safety_violation_bound,
)
from parpow.rng import RngStream

REFERENCE = ConsistencyParams.from_alpha(1 / 600, 50, 0.25, 1.0, 10.0)


def params(L=50, alpha=0.25, delta=1.0, Delta=10.0):
    return ConsistencyParams.from_alpha(1 / 600, L, alpha, delta, Delta)


def assert_pmf_close(a, b, tol=1e-10):
    n = max(len(a.probabilities), len(b.probabilities))
    pa = np.pad(a.probabilities, (0, n - len(a.probabilities)))
    pb = np.pad(b.probabilities, (0, n - len(b.probabilities)))
    assert np.max(np.abs(pa - pb)) <= tol


# --- building blocks


def test_geometric_examples():
    pm = geometric_lead_pmf(ConsistencyParams(1 / 600, 1, 0.75, 0.0, 0.0))
    assert pm.probabilities[0] == pytest.approx(2 / 3)
    heavy = geometric_lead_pmf(ConsistencyParams(1 / 600, 1, 0.51, 0.0, 0.0))
    assert len(heavy.probabilities) >= 600
    assert heavy.truncation_mass <= 1e-12
    with pytest.raises(InsecureRegimeError):
        geometric_lead_pmf(ConsistencyParams(1 / 600, 1, 0.5, 0.0, 0.0))


def test_geometric_mean_vs_birth_death_walk():
    """Lead = supremum of a walk stepping +1 w.p. q and -1 w.p. p."""
    pr = ConsistencyParams(1 / 600, 50, 0.75, 1.0, 10.0)
    ratio = pr.q / pr.p
    rng = np.random.default_rng(11)
    sups = []
    for _ in range(10):
        steps = np.where(rng.random((100_000, 300)) < pr.q, 1, -1).astype(np.int16)
        walk = np.cumsum(steps, axis=1)
        sups.append(np.maximum(walk.max(axis=1), 0))
    s = np.concatenate(sups)
    se = s.std(ddof=1) / math.sqrt(len(s))
    pm = geometric_lead_pmf(pr)
    assert pm.mean() == pytest.approx(ratio / (1 - ratio), rel=1e-9)
    assert abs(s.mean() - pm.mean()) < 3 * se


def test_negbin_examples():
    assert negbin_pmf(7, 1.0).probabilities.tolist() == [1.0]
    g = negbin_pmf(1, 0.6)
    assert g.probabilities[0] == pytest.approx(0.6)
    assert g.probabilities[3] == pytest.approx(0.6 * 0.4**3)
    nb = negbin_pmf(50, 0.75)
    assert nb.mean() == pytest.approx(50 * 0.25 / 0.75, abs=1e-6)
    samples = np.random.default_rng(3).geometric(0.75, (200_000, 50)).sum(axis=1) - 50
    assert samples.mean() == pytest.approx(16.667, abs=0.05)


def test_negbin_closed_form():
    L, b = 6, 0.7
    pm = negbin_pmf(L, b)
    for k in range(20):
        assert pm.probabilities[k] == pytest.approx(comb(k + L - 1, k) * b**L * (1 - b) ** k, rel=1e-12)


def test_poisson_examples():
    assert poisson_sum_pmf(10, 0.0).probabilities.tolist() == [1.0]
    assert poisson_sum_pmf(50, 1 / 12).mean() == pytest.approx(50 / 12, abs=1e-9)
    lam_p = 50 / 600
    assert poisson_sum_pmf(2, lam_p * 10).mean() == pytest.approx(5 / 3, abs=1e-9)


def test_normalization():
    pr = REFERENCE
    for pm in (geometric_lead_pmf(pr), negbin_pmf(50, 0.75), poisson_sum_pmf(50, 1 / 12),
               poisson_sum_pmf(2, 10 / 12), geometric_lead_pmf(ConsistencyParams(1 / 600, 1, 0.51, 0, 0))):
        assert abs(pm.total - 1.0) < 1e-12
        assert pm.truncation_mass <= 1e-12


def test_convolution_identities():
    a = poisson_sum_pmf(1, 1.3)
    assert_pmf_close(convolve(a, Pmf.point(0)), a, 0)
    assert_pmf_close(convolve(poisson_sum_pmf(1, 1.3), poisson_sum_pmf(1, 2.1)), poisson_sum_pmf(1, 3.4))
    geo = negbin_pmf(1, 0.7)
    assert_pmf_close(convolve(geo, geo), negbin_pmf(2, 0.7))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.floats(0, 1), min_size=1, max_size=12).filter(lambda v: sum(v) > 0.1), min_size=3, max_size=3))
def test_convolution_algebra(raw):
    a, b, c = (Pmf(np.array(v) / sum(v)) for v in raw)
    assert_pmf_close(convolve(a, b), convolve(b, a))
    assert_pmf_close(convolve(convolve(a, b), c), convolve(a, convolve(b, c)))
    assert abs(convolve(a, b).total - 1) < 1e-12


# --- bound


def test_reference_point():
    r = safety_violation_bound(REFERENCE)
    assert 3e-5 <= r.bound <= 3e-4
    assert r.bound == pytest.approx(5.497190877360588e-05, rel=1e-9)
    assert r.truncation_error < 1e-10
    assert r.p == pytest.approx(0.690033, abs=1e-6)


def test_single_vote_is_weak():
    assert safety_violation_bound(params(L=1)).bound > 0.5


def test_curve_monotone_10_100():
    pts = consistency_curve(REFERENCE, range(10, 101))
    vals = [p.bound for p in pts]
    assert all(x >= y for x, y in zip(vals, vals[1:]))
    assert all(p.regime_ok for p in pts)


def test_curve_marks_insecure():
    pts = consistency_curve(params(alpha=0.45), [10, 50, 400])
    assert not pts[-1].regime_ok and math.isnan(pts[-1].bound)
    with pytest.raises(InsecureRegimeError):
        safety_violation_bound(params(L=400, alpha=0.45))


def test_alpha_zero_below():
    base = consistency_curve(params(alpha=0.25), range(5, 101, 5))
    zero = consistency_curve(params(alpha=0.0), range(5, 101, 5))
    assert all(z.bound < b.bound for z, b in zip(zero, base))


def test_doubling_delta():
    for L in range(5, 101, 5):
        assert safety_violation_bound(params(L, delta=2.0)).bound >= safety_violation_bound(params(L)).bound


@pytest.mark.parametrize("L", [20, 50, 80])
def test_monotone_grid(L):
    alphas = [0.0, 0.1, 0.2, 0.25, 0.3]
    deltas = [0.0, 0.25, 0.5, 1.0, 2.0]
    Deltas = [0.0, 5.0, 10.0, 20.0, 40.0]
    grid = np.array([[[safety_violation_bound(params(L, a, d, D)).bound for D in Deltas] for d in deltas] for a in alphas])
    tol = 1e-15
    assert (np.diff(grid, axis=0) >= -tol).all()
    assert (np.diff(grid, axis=1) >= -tol).all()
    assert (np.diff(grid, axis=2) >= -tol).all()


def test_decreasing_in_L_past_hump_grid():
    for a in (0.1, 0.2, 0.25):
        for d in (0.5, 1.0):
            for D in (5.0, 10.0):
                vals = [p.bound for p in consistency_curve(params(alpha=a, delta=d, Delta=D), range(10, 101, 10))]
                assert all(x >= y for x, y in zip(vals, vals[1:]))


@pytest.mark.parametrize("L", [10, 20, 50])
def test_monte_carlo_agreement(L):
    pr = params(L)
    est, se = monte_carlo_bound(pr, 10**6, RngStream(2024, L))
    assert abs(est - safety_violation_bound(pr).bound) < 3 * se
