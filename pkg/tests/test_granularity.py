import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose
from scipy.special import zeta as scipy_zeta

from fgiv.errors import DegenerateSample, InvalidMu, InvalidScale, MuOutOfRange, NotNormalized, TooFewTailObservations
from fgiv.granularity import (
    TABLE_MU,
    TAIL_METHODS,
    asymptotic_herfindahl_limit,
    classify_tail_regime,
    deterministic_shares,
    estimate_tail_index,
    herfindahl,
    mu_for_herfindahl,
    sample_pareto_sizes,
    size_rank_table,
    zeta,
)


def test_two_unit_grid():
    d = deterministic_shares(2, 1.0)
    assert_allclose(d.raw_sizes, [2.0, 1.0])
    assert_allclose(d.shares, [2 / 3, 1 / 3])


@pytest.mark.parametrize("n,mu", sorted(TABLE_MU.items()))
def test_table_configurations_have_herfindahl_near_012(n, mu):
    h = herfindahl(deterministic_shares(n, mu).shares)
    assert 0.11 <= h <= 0.13


def test_mu_for_herfindahl_rounds_to_table_values():
    for n, mu in TABLE_MU.items():
        assert abs(mu_for_herfindahl(n) - mu) < 0.01


def test_small_mu_does_not_overflow():
    s = deterministic_shares(1000, 0.01).shares
    assert np.all(np.isfinite(s)) and s[0] > 0.999


def test_pareto_draws():
    a = sample_pareto_sizes(1000, 1.2, scale=3.0, seed=5)
    b = sample_pareto_sizes(1000, 1.2, scale=3.0, seed=5)
    assert np.array_equal(a.raw_sizes, b.raw_sizes)
    assert a.raw_sizes.min() >= 3.0
    assert_allclose(a.shares.sum(), 1.0)
    with pytest.raises(InvalidScale):
        sample_pareto_sizes(10, 1.0, scale=0.0)
    with pytest.raises(InvalidMu):
        sample_pareto_sizes(10, -1.0)


def test_hill_recovers_pareto_index():
    x = sample_pareto_sizes(10**5, 0.5, seed=11).raw_sizes
    assert abs(estimate_tail_index(x, "mle", tail_fraction=0.1) - 0.5) < 0.05


def test_herfindahl_identity_cases():
    assert_allclose(herfindahl(np.full(10, 0.1)), 0.1)
    assert herfindahl(np.array([1.0])) == 1.0
    with pytest.raises(NotNormalized):
        herfindahl(np.array([0.5, 0.4]))


@given(arrays(float, st.integers(2, 40), elements=st.floats(0.01, 100.0)))
def test_herfindahl_bounds(raw):
    s = raw / raw.sum()
    h = herfindahl(s)
    n = s.size
    assert 1.0 / n - 1e-12 <= h <= 1.0 + 1e-12
    if np.allclose(s, 1.0 / n, rtol=0, atol=1e-15):
        assert_allclose(h, 1.0 / n, atol=1e-12)


@pytest.mark.parametrize("s", [1.5, 2.0, 2.5, 4.0, 10.0])
def test_zeta_against_scipy(s):
    assert_allclose(zeta(s), scipy_zeta(s), rtol=1e-13)


def test_zeta_limit_closed_form():
    closed = (math.pi**4 / 90) / (math.pi**2 / 6) ** 2
    assert_allclose(closed, 0.4, atol=1e-15)
    assert_allclose(asymptotic_herfindahl_limit(0.5), closed, atol=1e-12)
    h = herfindahl(deterministic_shares(10**6, 0.5).shares)
    assert abs(h - 0.4) < 0.01


def test_limit_domain_and_bounds():
    assert 0 < asymptotic_herfindahl_limit(0.99) < 1
    with pytest.raises(MuOutOfRange):
        asymptotic_herfindahl_limit(1.0)


def test_herfindahl_approaches_limit_monotonically():
    for mu in (0.5, 0.8):
        lim = asymptotic_herfindahl_limit(mu)
        gaps = [abs(herfindahl(deterministic_shares(10**k, mu).shares) - lim) for k in (3, 4, 5, 6)]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))


def test_thin_tail_rate():
    scaled = [herfindahl(deterministic_shares(10**k, 3.0).shares) * 10**k for k in (2, 3, 4, 5)]
    assert max(scaled) < 2.0 and min(scaled) > 1.0


@pytest.mark.parametrize("mu,case,rate", [
    (3.0, "I", "1/sqrt(N)"),
    (2.0, "II", "sqrt(log(N)/N)"),
    (1.5, "III", "N^{-(1-1/mu)}"),
    (1.0, "IV", "1/log(N)"),
    (0.5, "V", "Theta_p(1)"),
])
def test_regimes(mu, case, rate):
    reg = classify_tail_regime(mu)
    assert reg.case == case and reg.herfindahl_rate == rate


def test_slowly_varying_only_by_flag():
    assert classify_tail_regime(0.0).case == "V"
    assert classify_tail_regime(0.3, slowly_varying=True).case == "VI"


def test_grid_recovery_mle_and_rank():
    x = deterministic_shares(10**4, 0.8).raw_sizes
    assert 0.76 <= estimate_tail_index(x, "mle", tail_fraction=0.2) <= 0.84
    assert abs(estimate_tail_index(x, "ols_rank", tail_fraction=0.2) - 0.8) < 0.05


@pytest.mark.parametrize("mu", [0.5, 0.8, 1.5])
@pytest.mark.parametrize("method", TAIL_METHODS)
def test_all_methods_on_exact_pareto(mu, method):
    x = deterministic_shares(10**4, mu).raw_sizes
    tol = 0.2 if "percentile" in method else 0.1
    assert abs(estimate_tail_index(x, method) / mu - 1) < tol


def test_percentile_pair_formula():
    # two exact quantiles of a Pareto(mu) law give mu back
    mu, p, q = 0.7, 0.5, 0.9
    x = np.quantile(deterministic_shares(10**5, mu).raw_sizes, [p, q])
    assert_allclose(math.log((1 - p) / (1 - q)) / math.log(x[1] / x[0]), mu, rtol=1e-3)


def test_tail_errors():
    with pytest.raises(DegenerateSample):
        estimate_tail_index(np.full(100, 2.0))
    with pytest.raises(TooFewTailObservations):
        estimate_tail_index(np.arange(1.0, 50.0), "mle", tail_fraction=0.1)
    with pytest.raises(ValueError):
        estimate_tail_index(np.arange(1.0, 500.0), "nope")


def test_size_rank_table():
    t = size_rank_table([1.0, 4.0, 2.0])
    assert_allclose(t[:, 0], np.log([1, 2, 3]))
    assert_allclose(t[:, 1], np.log([4, 2, 1]))
