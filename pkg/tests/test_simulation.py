import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

import fgiv.simulation as sim
from fgiv.errors import ConfigError, InfeasibleTargets, TooManyFailures, TruthUnavailable, WeakDenominator
from fgiv.granularity import deterministic_shares, herfindahl
from fgiv.simulation import (
    DgpConfig,
    achieved_psi,
    banded_covariance,
    concentration_diagnostics,
    replication_seed,
    run_monte_carlo,
    simulate_design,
    solve_variance_targets,
)


def _shares(n=40, mu=0.9):
    return deterministic_shares(n, mu).shares


# ---------------------------------------------------------- calibration

@given(st.floats(0.05, 0.45), st.floats(0.5, 0.95), st.integers(1, 4))
def test_variance_targets_hit_shares(psi_u, psi_ue, r):
    S = _shares()
    h = herfindahl(S)
    tg = solve_variance_targets(DgpConfig(n=40, psi_u=psi_u, psi_u_eta=psi_ue, r=r), S)
    total = h + tg.sigma2_lambda * r * h + tg.sigma2_eps
    assert abs(h / total - psi_u) < 1e-10
    assert abs((h + tg.sigma2_lambda * r * h) / total - psi_ue) < 1e-10


def test_variance_targets_design_two_uses_share_quadratic_form():
    S = _shares()
    sig = banded_covariance(40, seed=1)
    tg = solve_variance_targets(DgpConfig(n=40, design="d2"), S, sig)
    assert_allclose(tg.var_u_s, S @ sig @ S)


def test_variance_targets_infeasible_and_boundary():
    S = _shares()
    with pytest.raises(InfeasibleTargets):
        solve_variance_targets(DgpConfig(n=40, psi_u=0.6, psi_u_eta=0.5), S)
    cfg = DgpConfig(n=40, psi_u=0.5, psi_u_eta=0.5)
    with pytest.raises(InfeasibleTargets):
        solve_variance_targets(cfg, S)
    tg = solve_variance_targets(cfg, S, strict=False)
    assert tg.sigma2_lambda == 0.0 and "zero_variance" in tg.flags


def test_mean_calibration_hits_targets_on_average():
    cfg = DgpConfig(n=40, calibration="mean")
    S = _shares()
    h = herfindahl(S)
    tg = solve_variance_targets(cfg, S)
    rng = np.random.default_rng(0)
    # |lambda_S|^2 is sigma2_lambda h chi2_r
    common = tg.sigma2_lambda * h * rng.chisquare(cfg.r, 400_000)
    total = h + common + tg.sigma2_eps
    assert abs(np.mean(h / total) - cfg.psi_u) < 2e-3
    assert abs(np.mean((h + common) / total) - cfg.psi_u_eta) < 2e-3


def test_config_validation():
    for kw in ({"design": "d3"}, {"n": 1}, {"phi_d": 0.1}, {"psi_u": 1.2},
               {"calibration": "median"}, {"tau": 1.0}, {"mu": -1.0}):
        with pytest.raises(ConfigError):
            DgpConfig(**kw)
    assert DgpConfig(design="d2").psi_u == 0.27


# -------------------------------------------------------------- banded

def test_banded_covariance_structure():
    sig = banded_covariance(10, k=2, tau=0.5, seed=0)
    sd = np.sqrt(np.diag(sig))
    assert np.all((sd**2 >= 0.5) & (sd**2 <= 1.0))
    assert_allclose(sig[0, 1], 0.5 * sd[0] * sd[1])
    assert_allclose(sig[0, 2], 0.25 * sd[0] * sd[2])
    assert sig[0, 3] == 0.0
    assert_allclose(sig, sig.T)
    assert np.linalg.eigvalsh(sig)[0] > 0


def test_banded_covariance_identity_when_tau_zero():
    sig = banded_covariance(5, tau=0.0, lo=1.0, hi=1.0)
    assert_allclose(sig, np.eye(5))


# -------------------------------------------------------------- markets

@pytest.mark.parametrize("design", ["d1", "d2"])
def test_simulated_market_identities(design):
    cfg = DgpConfig(n=30, t=100, design=design, seed=4)
    mk = simulate_design(cfg)
    tr = mk.truth
    S = tr["shares"]
    Y, p, d = mk.panel.values, mk.p.values, mk.d.values
    assert_allclose(Y, 0.1 * p[:, None] + tr["factors"] @ tr["loadings"].T + tr["u"], atol=1e-12)
    assert_allclose(d, -0.3 * p + tr["epsilon"], atol=1e-12)
    # market clears: share-weighted supply equals demand
    assert_allclose(Y @ S, d, atol=1e-10)
    assert_allclose(S.sum(), 1.0)


def test_simulation_is_deterministic():
    a = simulate_design(DgpConfig(n=20, t=50, seed=7))
    b = simulate_design(DgpConfig(n=20, t=50, seed=7))
    assert np.array_equal(a.panel.values, b.panel.values)
    c = simulate_design(DgpConfig(n=20, t=50, seed=8))
    assert not np.array_equal(a.panel.values, c.panel.values)


def test_achieved_psi_near_target():
    vals = [achieved_psi(simulate_design(DgpConfig(n=100, t=4000, seed=s)))["psi_u"] for s in range(20)]
    assert abs(np.mean(vals) - 0.23) < 0.05


def test_price_variance_stable_across_sizes():
    v = []
    for n in (30, 100, 500):
        cfg = DgpConfig(n=n, t=50)
        h = herfindahl(deterministic_shares(n, cfg.mu).shares)
        v.append(h / cfg.psi_u / (cfg.phi_d - cfg.phi_s) ** 2)
    assert max(v) / min(v) < 1.2


# -------------------------------------------------------- concentration

def test_concentration_equal_without_common_component():
    mk = simulate_design(DgpConfig(n=30, t=100))
    mk.truth["loadings"] = np.zeros_like(mk.truth["loadings"])
    c = concentration_diagnostics(mk)
    assert_allclose(c["mu2_d_gmm"], c["mu2_d_fgiv"])


def test_concentration_ordering_and_scale():
    mk = simulate_design(DgpConfig(n=30, t=400))
    c = concentration_diagnostics(mk)
    assert c["mu2_d_gmm"] >= c["mu2_d_fgiv"]
    mk.truth["sigma2_eps"] = 1e8
    assert concentration_diagnostics(mk)["mu2_d_gmm"] < 1e-3


def test_concentration_requires_truth():
    mk = simulate_design(DgpConfig(n=30, t=40))
    mk.truth["u"] = None
    with pytest.raises(TruthUnavailable):
        concentration_diagnostics(mk)


# ---------------------------------------------------------- Monte Carlo

def test_replication_seeds_differ():
    a = np.random.default_rng(replication_seed(1, 0)).random()
    b = np.random.default_rng(replication_seed(1, 1)).random()
    assert a != b
    assert a == np.random.default_rng(replication_seed(1, 0)).random()


def test_single_replication_report_is_the_fit():
    cfg = DgpConfig(n=30, t=100, seed=5)
    rep = run_monte_carlo(cfg, 1, ["demand_fgiv"])
    one = sim._replicate(cfg, 0, ["demand_fgiv"], sim.CovConfig(), 3)
    est = one["fits"]["demand_fgiv"][0]
    assert rep.estimators["demand_fgiv"]["bias"] == est + 0.3
    assert rep.estimators["demand_fgiv"]["rmse"] == abs(est + 0.3)


def test_monte_carlo_independent_of_parallelism():
    cfg = DgpConfig(n=30, t=100, seed=2)
    names = ["supply_fgiv", "demand_gmm"]
    a = run_monte_carlo(cfg, 6, names, parallelism=1)
    b = run_monte_carlo(cfg, 6, names, parallelism=2)
    for k in names:
        assert np.array_equal(a.estimates[k], b.estimates[k])
    assert a.to_dict() == b.to_dict()


def test_monte_carlo_report_contents():
    rep = run_monte_carlo(DgpConfig(n=30, t=200, seed=1), 40)
    d = rep.to_dict()
    assert set(d["estimators"]) == set(sim.TABLE_ESTIMATORS)
    assert 0.15 < d["psi_achieved"]["psi_u"] < 0.35
    for name, e in d["estimators"].items():
        assert 0 <= e["t_size"] <= 1 and e["rmse"] >= abs(e["bias"])
        assert ("j_size" in e) == ("gmm" in name)


def test_monte_carlo_failure_limit(monkeypatch):
    def boom(*a, **k):
        raise WeakDenominator("forced")

    monkeypatch.setattr(sim, "fgiv_demand", boom)
    with pytest.raises(TooManyFailures):
        run_monte_carlo(DgpConfig(n=30, t=60), 3, ["demand_fgiv"])


def test_monte_carlo_config_errors():
    cfg = DgpConfig(n=30, t=60)
    for kw in ({"m_reps": 0}, {"estimators": []}, {"estimators": ["nope"]}, {"nominal_size": 1.5}):
        args = {"m_reps": 2, **kw}
        with pytest.raises(ConfigError):
            run_monte_carlo(cfg, **args)
