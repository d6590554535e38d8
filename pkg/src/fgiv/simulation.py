"""Simulated granular markets and the Monte Carlo harness."""

from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import (
    ConfigError,
    FgivError,
    InfeasibleTargets,
    NotPositiveDefinite,
    TooManyFailures,
    TruthUnavailable,
)
from .estimators import (
    CovConfig,
    bn_fgmm_demand,
    fgiv_demand,
    fgiv_supply_alg1,
    gk_baselines,
    gmm_demand,
    gmm_supply_alg3,
    gmm_supply_alg3prime,
    misspecified_supply,
)
from .factors import annihilator_matrix, pca_factors
from .granularity import TABLE_MU, deterministic_shares, herfindahl, mu_for_herfindahl
from .panel import AggregateSeries, Panel

SCHEMA_VERSION = "1.0"
TABLE_ESTIMATORS = (
    "supply_fgiv", "supply_gk", "supply_gmm", "supply_gmm_rmax",
    "demand_fgiv", "demand_gk", "demand_gmm", "demand_gmm_rmax",
)
EXTRA_ESTIMATORS = ("supply_misspec", "supply_gmm_fgl", "demand_fgmm")
ALL_ESTIMATORS = TABLE_ESTIMATORS + EXTRA_ESTIMATORS
# average variance shares reported for each design
DESIGN_PSI = {"d1": (0.23, 0.58), "d2": (0.27, 0.64)}
MAX_FAILURE_RATE = 0.10


@dataclass
class DgpConfig:
    """Simulation design. Unset ``mu`` and ``psi_*`` take design defaults."""

    n: int = 100
    t: int = 400
    mu: Optional[float] = None
    phi_s: float = 0.1
    phi_d: float = -0.3
    r: int = 2
    design: str = "d1"
    psi_u: Optional[float] = None
    psi_u_eta: Optional[float] = None
    band_k: int = 3
    tau: float = 0.5
    variance_low: float = 0.5
    variance_high: float = 1.0
    calibration: str = "population"
    seed: int = 0

    def __post_init__(self):
        if self.design not in DESIGN_PSI:
            raise ConfigError(f"design must be one of {sorted(DESIGN_PSI)}")
        if self.n < 2 or self.t < 2 or self.r < 1:
            raise ConfigError("need n >= 2, t >= 2 and r >= 1")
        if self.phi_d == self.phi_s:
            raise ConfigError("phi_d must differ from phi_s")
        if self.mu is None:
            self.mu = TABLE_MU.get(self.n) or mu_for_herfindahl(self.n, 0.12)
        if self.mu <= 0:
            raise ConfigError("mu must be positive")
        pu, pue = DESIGN_PSI[self.design]
        self.psi_u = pu if self.psi_u is None else float(self.psi_u)
        self.psi_u_eta = pue if self.psi_u_eta is None else float(self.psi_u_eta)
        if not (0 < self.psi_u < 1 and 0 < self.psi_u_eta < 1):
            raise ConfigError("psi targets must lie in (0, 1)")
        if self.calibration not in ("population", "mean"):
            raise ConfigError("calibration must be 'population' or 'mean'")
        if not (0 <= self.tau < 1 and self.band_k >= 0 and 0 < self.variance_low <= self.variance_high):
            raise ConfigError("invalid banded covariance parameters")

    @property
    def psi_u_eps(self) -> float:
        return 1.0 + self.psi_u - self.psi_u_eta

    def replace(self, **kw) -> "DgpConfig":
        d = asdict(self)
        d.update(kw)
        return DgpConfig(**d)


@dataclass
class VarianceTargets:
    sigma2_u: float
    sigma2_lambda: float
    sigma2_eps: float
    var_u_s: float
    flags: list = field(default_factory=list)


def solve_variance_targets(cfg: DgpConfig, shares, sigma_u: Optional[np.ndarray] = None,
                           strict: bool = True) -> VarianceTargets:
    """Loading and demand-shock variances that hit the price-variance shares.

    With the idiosyncratic scale fixed at one, ``V(u_S) = h`` (Design 1) or
    ``S' Sigma_u S`` (Design 2), ``V(lambda_S' eta) = sigma2_lambda r h`` and
    ``V(eps) = sigma2_eps``; the two targets are linear in the remaining
    variances. With ``cfg.calibration == "mean"`` the targets are instead met
    on average over loading draws, see :func:`_mean_calibration`.
    """
    S = np.asarray(getattr(shares, "shares", shares), dtype=float)
    h = herfindahl(S)
    v_us = h if sigma_u is None else float(S @ sigma_u @ S)
    total = v_us / cfg.psi_u
    s2l = (cfg.psi_u_eta - cfg.psi_u) * total / (cfg.r * h)
    s2e = (1.0 - cfg.psi_u_eta) * total
    flags = []
    if s2l <= 0 or s2e <= 0:
        if strict or s2l < 0 or s2e < 0:
            raise InfeasibleTargets(f"solved variances not positive: lambda {s2l:.3g}, eps {s2e:.3g}")
        flags.append("zero_variance")
    elif getattr(cfg, "calibration", "population") == "mean":
        b, s2e = _mean_calibration(v_us, s2l * cfg.r * h, s2e, cfg.psi_u, cfg.psi_u_eta, cfg.r)
        s2l = b / (cfg.r * h)
    return VarianceTargets(1.0, float(s2l), float(s2e), v_us, flags)


def _mean_calibration(a, b0, e0, psi_u, psi_u_eta, r, nodes: int = 80):
    """Common and demand variances whose price shares hit the targets on average.

    Given the loadings, the common variance is ``b X`` with ``X ~ chi2_r / r``;
    the expectations over X use generalized Gauss-Laguerre quadrature.
    """
    from scipy.optimize import fsolve
    from scipy.special import gamma, roots_genlaguerre

    g, w = roots_genlaguerre(nodes, r / 2.0 - 1.0)
    x = 2.0 * g / r
    w = w / gamma(r / 2.0)

    def resid(logs):
        b, e = np.exp(logs)
        tot = a + b * x + e
        return [w @ (a / tot) - psi_u, w @ ((a + b * x) / tot) - psi_u_eta]

    sol, info, ok, msg = fsolve(resid, np.log([b0, e0]), full_output=True, xtol=1e-12)
    if ok != 1 or np.max(np.abs(resid(sol))) > 1e-8:
        raise InfeasibleTargets(f"mean calibration failed: {msg}")
    b, e = np.exp(sol)
    return float(b), float(e)


def banded_covariance(n: int, k: int = 3, tau: float = 0.5, lo: float = 0.5, hi: float = 1.0,
                      seed=None, retries: int = 5) -> np.ndarray:
    """Banded covariance ``tau^|i-j| sqrt(v_i v_j)`` within bandwidth k.

    Variances are drawn from U[lo, hi]. When the band is not positive
    definite tau is halved (with a warning) up to ``retries`` times.
    """
    if not (0 <= tau < 1 and k >= 0 and 0 < lo <= hi):
        raise ConfigError("invalid banded covariance parameters")
    rng = np.random.default_rng(seed)
    v = rng.uniform(lo, hi, n)
    sd = np.sqrt(v)
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    for attempt in range(retries + 1):
        R = np.where(lag <= k, float(tau) ** lag, 0.0)
        sigma = R * np.outer(sd, sd)
        try:
            np.linalg.cholesky(sigma)
            return sigma
        except np.linalg.LinAlgError:
            if attempt == retries:
                break
            warnings.warn(f"banded covariance not positive definite at tau={tau}; halving", stacklevel=2)
            tau *= 0.5
    raise NotPositiveDefinite("banded covariance not positive definite after retries")


@dataclass
class SimulatedMarket:
    panel: Panel
    d: AggregateSeries
    p: AggregateSeries
    truth: dict


def simulate_design(cfg: DgpConfig, rng=None) -> SimulatedMarket:
    """Draw one market from the supply/demand system with granular shocks.

    ``y_it = phi_s p_t + lambda_i' eta_t + u_it``, ``d_t = phi_d p_t + eps_t``
    and the market-clearing price
    ``p_t = (u_St + lambda_S' eta_t - eps_t) / (phi_d - phi_s)``.
    """
    rng = np.random.default_rng(cfg.seed if rng is None else rng)
    N, T, r = cfg.n, cfg.t, cfg.r
    S = deterministic_shares(N, cfg.mu).shares
    sigma_u = None
    if cfg.design == "d2":
        sigma_u = banded_covariance(N, cfg.band_k, cfg.tau, cfg.variance_low, cfg.variance_high, rng)
    tg = solve_variance_targets(cfg, S, sigma_u)
    eta = rng.standard_normal((T, r))
    lam = rng.standard_normal((N, r)) * math.sqrt(tg.sigma2_lambda)
    if sigma_u is None:
        u = rng.standard_normal((T, N)) * math.sqrt(tg.sigma2_u)
    else:
        u = rng.standard_normal((T, N)) @ np.linalg.cholesky(sigma_u).T
    eps = rng.standard_normal(T) * math.sqrt(tg.sigma2_eps)
    u_s = u @ S
    lam_s = lam.T @ S
    p = (u_s + eta @ lam_s - eps) / (cfg.phi_d - cfg.phi_s)
    y = cfg.phi_s * p[:, None] + eta @ lam.T + u
    d = cfg.phi_d * p + eps
    truth = {
        "factors": eta, "loadings": lam, "u": u, "epsilon": eps, "shares": S,
        "sigma_u": sigma_u, "sigma2_u": tg.sigma2_u, "sigma2_lambda": tg.sigma2_lambda,
        "sigma2_eps": tg.sigma2_eps, "phi_s": cfg.phi_s, "phi_d": cfg.phi_d,
    }
    return SimulatedMarket(Panel(y), AggregateSeries(d, "d"), AggregateSeries(p, "p"), truth)


def achieved_psi(m: SimulatedMarket) -> dict:
    """Sample shares of price variance due to u_S, u_S + common, u_S + eps."""
    tr = m.truth
    c = 1.0 / (tr["phi_d"] - tr["phi_s"]) ** 2
    u_s = tr["u"] @ tr["shares"]
    common = tr["factors"] @ (tr["loadings"].T @ tr["shares"])
    vp = np.var(m.p.values)
    return {
        "psi_u": float(c * np.var(u_s) / vp),
        "psi_u_eta": float(c * np.var(u_s + common) / vp),
        "psi_u_eps": float(c * np.var(u_s + tr["epsilon"]) / vp),
    }


def concentration_diagnostics(m: SimulatedMarket) -> dict:
    """Concentration parameters of the demand GMM and FGIV estimators.

    ``(u_S'u_S + |eta lambda_S|^2) / sigma2_eps`` and
    ``u_S'u_S / (lambda_S'lambda_S + sigma2_eps)``; the common component enters
    the first through its sum of squares over time so both scale with T.
    """
    tr = getattr(m, "truth", None)
    if not tr or tr.get("u") is None:
        raise TruthUnavailable("simulation truth is required")
    S = tr["shares"]
    u_s = tr["u"] @ S
    lam_s = tr["loadings"].T @ S
    common = tr["factors"] @ lam_s
    s2e = tr["sigma2_eps"]
    return {
        "mu2_d_gmm": float((u_s @ u_s + common @ common) / s2e),
        "mu2_d_fgiv": float(u_s @ u_s / (lam_s @ lam_s + s2e)),
    }


def replication_seed(seed: int, m: int) -> np.random.SeedSequence:
    """Seed for replication m, a SeedSequence hash of (seed, m)."""
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(int(m),))


def _run_one(args):
    cfg, m, estimators, cov, rmax = args
    with threadpool_limits(limits=1):
        return _replicate(cfg, m, estimators, cov, rmax)


def _replicate(cfg: DgpConfig, m: int, estimators, cov: CovConfig, rmax: int) -> dict:
    rng = np.random.default_rng(replication_seed(cfg.seed, m))
    mk = simulate_design(cfg, rng)
    Y, p, d = mk.panel.values, mk.p.values, mk.d.values
    S = mk.truth["shares"]
    Yd = Y - Y.mean(axis=1, keepdims=True)
    fac = pca_factors(Yd, cfg.r)
    fac_max = pca_factors(Yd, rmax) if any(e.endswith("rmax") for e in estimators) else None
    z = Yd @ (annihilator_matrix(fac.loadings).q @ S)
    u_s = mk.truth["u"] @ S
    out = {"psi": achieved_psi(mk), "giv_corr": float(np.corrcoef(z, u_s)[0, 1]), "fits": {}}
    gk = None
    for name in estimators:
        try:
            if name == "supply_fgiv":
                f = fgiv_supply_alg1(Y, p, S, cfg.r, cov, factors=fac)
            elif name == "supply_misspec":
                f = misspecified_supply(Y, p, S, cfg.r, factors=fac)
            elif name in ("supply_gk", "demand_gk"):
                gk = gk or gk_baselines(Y, p, d, S, fac)
                f = gk[name.split("_")[0]]
            elif name == "supply_gmm":
                f = gmm_supply_alg3(Y, p, d, S, cfg.r, cov, factors=fac)
            elif name == "supply_gmm_rmax":
                f = gmm_supply_alg3(Y, p, d, S, rmax, cov, factors=fac_max)
            elif name == "supply_gmm_fgl":
                f = gmm_supply_alg3prime(Y, p, d, S, cfg.r, CovConfig(method="fgl"), factors=fac)
            elif name == "demand_fgiv":
                f = fgiv_demand(d, p, z)
            elif name == "demand_gmm":
                f = gmm_demand(d, p, z, fac)
            elif name == "demand_gmm_rmax":
                zm = Yd @ (annihilator_matrix(fac_max.loadings).q @ S)
                f = gmm_demand(d, p, zm, fac_max)
            elif name == "demand_fgmm":
                f = bn_fgmm_demand(d, p, fac)
            else:
                raise ConfigError(f"unknown estimator {name!r}")
            out["fits"][name] = (f.estimate, f.std_error,
                                 None if f.j_stat is None else f.j_stat.p_value)
        except ConfigError:
            raise
        except (FgivError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out["fits"][name] = type(exc).__name__
    return out


@dataclass
class McReport:
    estimators: dict
    config: dict
    m_reps: int
    nominal_size: float
    psi_achieved: dict
    giv_corr_min: float
    giv_corr_mean: float
    estimates: dict = field(default_factory=dict, repr=False)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self, include_draws: bool = False) -> dict:
        out = {
            "schema_version": self.schema_version,
            "config": self.config,
            "m_reps": self.m_reps,
            "nominal_size": self.nominal_size,
            "psi_achieved": self.psi_achieved,
            "giv_corr_min": self.giv_corr_min,
            "giv_corr_mean": self.giv_corr_mean,
            "estimators": self.estimators,
        }
        if include_draws:
            out["estimates"] = {k: [float(x) for x in v] for k, v in self.estimates.items()}
        return out


def _z_crit(size: float) -> float:
    from scipy.stats import norm

    return float(norm.ppf(1.0 - size / 2.0))


def run_monte_carlo(cfg: DgpConfig, m_reps: int, estimators: Iterable[str] = TABLE_ESTIMATORS,
                    nominal_size: float = 0.05, parallelism: int = 1,
                    cov_cfg: Optional[CovConfig] = None, rmax: int = 3) -> McReport:
    """Bias, RMSE and test sizes over ``m_reps`` simulated markets.

    Replication m draws from a generator seeded by ``(cfg.seed, m)`` and runs
    with single-threaded BLAS, so results do not depend on ``parallelism``.
    Failed fits are excluded per estimator; more than 10% failures aborts.
    """
    estimators = tuple(estimators)
    if m_reps < 1:
        raise ConfigError("m_reps must be at least 1")
    if not estimators:
        raise ConfigError("estimator set is empty")
    bad = [e for e in estimators if e not in ALL_ESTIMATORS]
    if bad:
        raise ConfigError(f"unknown estimators {bad}")
    if not 0 < nominal_size < 1:
        raise ConfigError("nominal_size must lie in (0, 1)")
    cov = cov_cfg or CovConfig()
    jobs = [(cfg, m, estimators, cov, rmax) for m in range(m_reps)]
    if parallelism <= 1:
        results = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as ex:
            results = list(ex.map(_run_one, jobs, chunksize=max(1, m_reps // (4 * parallelism))))
    crit = _z_crit(nominal_size)
    summary, draws = {}, {}
    for name in estimators:
        truth = cfg.phi_s if name.startswith("supply") else cfg.phi_d
        ok = [r["fits"][name] for r in results if isinstance(r["fits"][name], tuple)]
        fails = m_reps - len(ok)
        if fails / m_reps > MAX_FAILURE_RATE:
            raise TooManyFailures(f"{name}: {fails} of {m_reps} replications failed")
        est = np.array([o[0] for o in ok])
        se = np.array([o[1] for o in ok])
        err = est - truth
        entry = {
            "bias": float(err.mean()),
            "rmse": float(np.sqrt(np.mean(err ** 2))),
            "t_size": float(np.mean(np.abs(err / se) > crit)),
            "failure_rate": fails / m_reps,
        }
        jp = [o[2] for o in ok if o[2] is not None]
        if jp:
            entry["j_size"] = float(np.mean(np.array(jp) < nominal_size))
        summary[name] = entry
        draws[name] = est
    corr = np.array([r["giv_corr"] for r in results])
    psi = {k: float(np.mean([r["psi"][k] for r in results])) for k in results[0]["psi"]}
    return McReport(summary, asdict(cfg), m_reps, nominal_size, psi, float(corr.min()),
                    float(corr.mean()), draws)


def default_parallelism() -> int:
    return max(1, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1)
