"""Granular instrument construction and elasticity estimators.

Covers the just-identified demand and supply estimators, the iterative supply
algorithms that update the idiosyncratic precision matrix, the efficient GMM
versions with overidentification tests, HC/HAC variances, first-stage
diagnostics and the comparison estimators used in the simulation tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaincc

from .covariance import (
    DEFAULT_C_GRID,
    PrecisionEstimate,
    cross_validate_rho,
    cross_validate_threshold,
    fgl_precision,
    identity_precision,
    poet_covariance,
)
from .errors import (
    ConfigError,
    LagTooLarge,
    LagWithoutTimeVaryingShares,
    NotPositiveDefinite,
    NoFeasibleC,
    SingularDesign,
    SingularWeightMatrix,
    WeakDenominator,
    DimensionMismatch,
)
from .factors import FactorEstimate, annihilator_matrix, iterative_ols_pca, pca_factors
from .panel import AggregateSeries, as_matrix, as_vector

WEAK_TOL = 1e-10
WEAK_F = 10.0


def default_hac_lags(T: int) -> int:
    return int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))


def _lags(variance_kind: str, m: Optional[int], T: int) -> int:
    if variance_kind == "hc":
        return 0
    if variance_kind == "hac":
        return default_hac_lags(T) if m is None else int(m)
    raise ConfigError(f"variance_kind must be 'hc' or 'hac', got {variance_kind!r}")


def long_run_covariance(G: np.ndarray, m: int) -> np.ndarray:
    """Bartlett-weighted long-run covariance of the rows of G (T x l)."""
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[:, None]
    T = G.shape[0]
    if not 0 <= m < T:
        raise LagTooLarge(f"lag count must satisfy 0 <= m < T, got m={m}, T={T}")
    out = G.T @ G / T
    for j in range(1, m + 1):
        gj = G[j:].T @ G[:-j] / T
        out += (1.0 - j / (m + 1.0)) * (gj + gj.T)
    return out


def hac_variance(a, b, m: int = 0) -> float:
    """Bartlett long-run variance of the products ``a_t b_t``; m = 0 is the HC form."""
    a, b = as_vector(a), as_vector(b)
    if a.shape != b.shape:
        raise DimensionMismatch("series lengths differ")
    return float(long_run_covariance(a * b, m)[0, 0])


@dataclass(frozen=True)
class JTest:
    stat: float
    df: int
    p_value: float


def chi2_sf(x: float, df: int) -> float:
    return float(gammaincc(df / 2.0, max(x, 0.0) / 2.0))


def j_test(moments, omega, df: int) -> JTest:
    """Overidentification statistic ``T g' omega^-1 g`` with chi-square p-value."""
    g = np.asarray(moments, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    if df < 1:
        raise ValueError("df must be at least 1")
    T = g.shape[0]
    gbar = g.mean(axis=0)
    W, _ = _safe_inverse(np.asarray(omega, dtype=float))
    stat = float(T * gbar @ W @ gbar)
    return JTest(stat, int(df), chi2_sf(stat, df))


def _safe_inverse(omega: np.ndarray):
    """Inverse of a weight matrix; one ridge retry when numerically singular."""
    omega = 0.5 * (omega + omega.T)
    flags = []
    for attempt in range(2):
        ev = np.linalg.eigvalsh(omega)
        if ev[-1] > 0 and ev[0] > 1e-12 * ev[-1]:
            return np.linalg.inv(omega), flags
        if attempt == 0:
            ell = omega.shape[0]
            ridge = 1e-10 * np.trace(omega) / ell
            if ridge <= 0:
                ridge = 1e-10
            omega = omega + ridge * np.eye(ell)
            flags.append("ridge")
    raise SingularWeightMatrix("weight matrix singular after ridge")


@dataclass(frozen=True)
class InstrumentSet:
    columns: np.ndarray
    roles: tuple

    def __post_init__(self):
        c = np.asarray(self.columns, dtype=float)
        if c.ndim == 1:
            c = c[:, None]
        if c.shape[1] < 1 or c.shape[1] != len(self.roles):
            raise DimensionMismatch("instrument columns and roles disagree")
        object.__setattr__(self, "columns", c)


@dataclass
class ElasticityFit:
    """Point estimate, standard error and diagnostics of one elasticity fit."""

    estimate: float
    std_error: float
    variance_kind: str
    hac_lags: int
    t_stat: float
    theta: Optional[np.ndarray] = None
    j_stat: Optional[JTest] = None
    first_stage: dict = field(default_factory=dict)
    instrument: Optional[np.ndarray] = None
    iterations: int = 0
    converged: bool = True
    flags: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    def t_against(self, value: float) -> float:
        return (self.estimate - value) / self.std_error

    def to_dict(self) -> dict:
        out = {
            "estimate": self.estimate,
            "std_error": self.std_error,
            "variance_kind": self.variance_kind,
            "hac_lags": self.hac_lags,
            "t_stat": self.t_stat,
            "theta": None if self.theta is None else [float(x) for x in self.theta],
            "j_stat": None if self.j_stat is None else {
                "value": self.j_stat.stat, "df": self.j_stat.df, "p_value": self.j_stat.p_value},
            "first_stage": dict(self.first_stage),
            "iterations": self.iterations,
            "converged": self.converged,
            "flags": list(self.flags),
            "trace": [float(x) for x in self.trace],
        }
        for k, v in self.extras.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out


def _make_fit(est, var, T, kind, m, **kw) -> ElasticityFit:
    if not (var > 0 and np.isfinite(var)):
        raise WeakDenominator("variance estimate is not positive")
    se = math.sqrt(var / T)
    fs = kw.get("first_stage") or {}
    flags = kw.pop("flags", [])
    if fs.get("weak"):
        flags = flags + ["weak_instrument"]
    return ElasticityFit(float(est), se, kind, m, float(est) / se, flags=flags, **kw)


# ---------------------------------------------------------------- instruments

def _q_matrix(q):
    return np.asarray(getattr(q, "q", q), dtype=float)


def construct_giv(demeaned, q, shares, lag_shares: bool = False) -> AggregateSeries:
    """Granular instrument ``S' Q y_t`` from a demeaned panel.

    With ``lag_shares`` the period t instrument uses the shares of period
    t - 1 and the first period is dropped.
    """
    Y = as_matrix(demeaned)
    Q = _q_matrix(q)
    S = as_vector(shares)
    T, N = Y.shape
    if Q.shape != (N, N) or S.shape[-1] != N:
        raise DimensionMismatch("panel, annihilator and shares disagree on N")
    if lag_shares:
        if S.ndim != 2:
            raise LagWithoutTimeVaryingShares("lagged shares need a T x N share matrix")
        if S.shape[0] != T:
            raise DimensionMismatch("share matrix must have T rows")
        z = np.einsum("tn,tn->t", Y[1:] @ Q, S[:-1])
    elif S.ndim == 1:
        z = Y @ (Q @ S)
    else:
        if S.shape[0] != T:
            raise DimensionMismatch("share matrix must have T rows")
        z = np.einsum("tn,tn->t", Y @ Q, S)
    return AggregateSeries(z, "z_giv")


def first_stage_diagnostics(p, instruments) -> dict:
    """OLS of p on the instruments and an intercept.

    Returns the R-squared and the heteroskedasticity-robust (HC0) joint F
    statistic on the instrument coefficients; ``weak`` marks F < 10.
    """
    y = as_vector(p)
    Z = getattr(instruments, "columns", instruments)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    T, ell = Z.shape
    if T <= ell + 1:
        raise SingularDesign("need T > number of instruments + 1")
    X = np.column_stack([np.ones(T), Z])
    XtX = X.T @ X
    ev = np.linalg.eigvalsh(XtX)
    if ev[0] <= 1e-12 * ev[-1]:
        raise SingularDesign("instrument matrix is rank deficient")
    beta = np.linalg.solve(XtX, X.T @ y)
    e = y - X @ beta
    tss = float(np.sum((y - y.mean()) ** 2))
    rss = float(e @ e)
    r2 = 1.0 - rss / tss if tss > 0 else 0.0
    if rss <= 1e-20 * max(tss, 1e-300):
        f = math.inf
    else:
        A = np.linalg.inv(XtX)
        meat = (X * (e * e)[:, None]).T @ X
        V = A @ meat @ A
        b = beta[1:]
        f = float(b @ np.linalg.solve(V[1:, 1:], b) / ell)
    return {"f_stat": f, "r2": float(r2), "weak": bool(f < WEAK_F)}


# ------------------------------------------------------------ basic estimators

def _partial(F: Optional[np.ndarray], v: np.ndarray) -> np.ndarray:
    """Residual of v after projecting on the columns of F."""
    if F is None or F.size == 0:
        return v
    coef, *_ = np.linalg.lstsq(F, v, rcond=None)
    return v - F @ coef


def _ratio_iv(y, x, z, F, kind, m, label="") -> ElasticityFit:
    # (M z)' y / (M z)' x with the factors partialled out when F is given
    T = y.shape[0]
    zt = _partial(F, z)
    den = float(zt @ x)
    if abs(den) / T < WEAK_TOL:
        raise WeakDenominator(f"|sum z x| / T = {abs(den) / T:.3g} below {WEAK_TOL}")
    est = float(zt @ y) / den
    resid = _partial(F, y - est * x)
    lags = _lags(kind, m, T)
    var = hac_variance(zt, resid, lags) / (den / T) ** 2
    return _make_fit(est, var, T, kind, lags, instrument=z,
                     first_stage=first_stage_diagnostics(x, z if F is None else np.column_stack([z, F])))


def fgiv_demand(d, p, z, variance_kind: str = "hc", m: Optional[int] = None) -> ElasticityFit:
    """Just-identified demand elasticity ``sum d z / sum p z``."""
    d, p, z = as_vector(d), as_vector(p), as_vector(z)
    if not (d.shape == p.shape == z.shape):
        raise DimensionMismatch("series lengths differ")
    return _ratio_iv(d, p, z, None, variance_kind, m)


def _factor_matrix(factors) -> Optional[np.ndarray]:
    if factors is None:
        return None
    F = getattr(factors, "factors", factors)
    F = np.asarray(F, dtype=float)
    if F.ndim == 1:
        F = F[:, None]
    return F if F.shape[1] else None


def _gmm(y, X, Z, m):
    """Two-step efficient GMM with a 2SLS first step.

    Returns (theta, V, J, W, flags) where V is the asymptotic variance of
    sqrt(T)(theta - theta0) and J uses the first-step weight matrix.
    """
    T = y.shape[0]
    ZX = Z.T @ X / T
    Zy = Z.T @ y / T
    W1, _ = _safe_inverse(Z.T @ Z / T)
    th1 = np.linalg.solve(ZX.T @ W1 @ ZX, ZX.T @ W1 @ Zy)
    e1 = y - X @ th1
    W, flags = _safe_inverse(long_run_covariance(Z * e1[:, None], m))
    H = ZX.T @ W @ ZX
    th = np.linalg.solve(H, ZX.T @ W @ Zy)
    g = Z.T @ (y - X @ th) / T
    J = float(T * g @ W @ g)
    return th, np.linalg.inv(H), J, W, flags


def gmm_demand(d, p, z_giv, factors=None, variance_kind: str = "hc",
               m: Optional[int] = None) -> ElasticityFit:
    """Efficient GMM demand elasticity with instruments (z, factors).

    ``z_giv`` may be None for the factors-only estimator. The J statistic has
    as many degrees of freedom as there are instruments beyond the first.
    """
    d, p = as_vector(d), as_vector(p)
    T = d.shape[0]
    cols, roles = [], []
    if z_giv is not None:
        cols.append(as_vector(z_giv)[:, None])
        roles.append("giv")
    F = _factor_matrix(factors)
    if F is not None:
        cols.append(F)
        roles += [f"factor_{k + 1}" for k in range(F.shape[1])]
    if not cols:
        raise ValueError("no instruments supplied")
    Z = np.column_stack(cols)
    if Z.shape[0] != T or p.shape[0] != T:
        raise DimensionMismatch("series lengths differ")
    if np.max(np.abs(Z.T @ p)) / T < WEAK_TOL:
        raise WeakDenominator("instruments are orthogonal to price")
    lags = _lags(variance_kind, m, T)
    th, V, J, _, flags = _gmm(d, p[:, None], Z, lags)
    df = Z.shape[1] - 1
    jt = JTest(J, df, chi2_sf(J, df)) if df >= 1 else None
    return _make_fit(th[0], V[0, 0], T, variance_kind, lags, j_stat=jt,
                     first_stage=first_stage_diagnostics(p, Z), flags=flags,
                     instrument=Z[:, 0].copy(), extras={"instrument_roles": roles})


def bn_fgmm_demand(d, p, factors, variance_kind: str = "hc", m: Optional[int] = None) -> ElasticityFit:
    """Demand GMM using only the estimated factors as instruments."""
    return gmm_demand(d, p, None, factors, variance_kind, m)


# --------------------------------------------------- precision update settings

@dataclass
class CovConfig:
    """How the idiosyncratic precision matrix is updated inside the loops.

    ``cv`` selects the POET constant (or FGL penalty) by cross-validation at
    the first update and keeps it fixed afterwards.
    """

    method: str = "poet"
    shrink: str = "soft"
    c_const: float = 1.0
    rho: float = 0.05
    weighted: bool = True
    cv: bool = False
    folds: int = 5
    c_grid: Sequence[float] = DEFAULT_C_GRID
    rho_grid: Sequence[float] = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)

    def __post_init__(self):
        if self.method not in ("identity", "poet", "fgl"):
            raise ConfigError(f"unknown covariance method {self.method!r}")
        if self.shrink not in ("hard", "soft"):
            raise ConfigError(f"unknown shrinkage {self.shrink!r}")


class _PrecisionUpdater:
    def __init__(self, cfg: CovConfig, r: int):
        self.cfg = cfg
        self.r = r
        self.c = cfg.c_const
        self.rho = cfg.rho
        self.tuned = not cfg.cv

    def __call__(self, resid: np.ndarray) -> PrecisionEstimate:
        cfg = self.cfg
        if cfg.method == "identity":
            return identity_precision(resid.shape[1])
        if cfg.method == "poet":
            if not self.tuned:
                self.c = cross_validate_threshold(resid, self.r, cfg.shrink, cfg.folds, cfg.c_grid)
                self.tuned = True
            return poet_covariance(resid, self.r, cfg.shrink, self.c)
        if not self.tuned:
            self.rho = cross_validate_rho(resid, cfg.rho_grid, cfg.folds, cfg.weighted)
            self.tuned = True
        return fgl_precision(resid, self.rho, cfg.weighted)


def _prepare(panel, shares, r, lag_shares, factors=None):
    Y = as_matrix(panel)
    Yd = Y - Y.mean(axis=1, keepdims=True)
    fac = factors if factors is not None else pca_factors(Yd, r)
    Q = annihilator_matrix(fac.loadings)
    z = construct_giv(Yd, Q, shares, lag_shares).values
    return Y, Yd, fac, Q, z


def _trim(lag_shares, *arrays):
    if not lag_shares:
        return arrays
    return tuple(None if a is None else a[1:] for a in arrays)


# --------------------------------------------------------- supply estimators

def _alg1_loop(Y, p, z, F, cfg, r, tol, max_iter, resid_fn=None):
    """Shared fixed-point iteration of the just-identified supply estimator."""
    N = Y.shape[1]
    E = np.full(N, 1.0 / N)
    fit_dep = lambda E: Y @ E
    zt = _partial(F, z)
    den = float(zt @ p)
    T = Y.shape[0]
    if abs(den) / T < WEAK_TOL:
        raise WeakDenominator(f"|z' M p| / T = {abs(den) / T:.3g} below {WEAK_TOL}")
    phi = float(zt @ fit_dep(E)) / den
    trace, flags = [phi], []
    update = _PrecisionUpdater(cfg, r)
    converged, it = True, 0
    prec = None
    if cfg.method != "identity":
        converged = False
        for it in range(1, max_iter + 1):
            resid = Y - np.outer(p, phi) if resid_fn is None else resid_fn(phi)
            try:
                prec = update(resid)
            except (NotPositiveDefinite, NoFeasibleC):
                flags.append("precision_update_failed")
                break
            E = prec.e_weights
            new = float(zt @ fit_dep(E)) / den
            trace.append(new)
            step = abs(new - phi)
            phi = new
            if step < tol:
                converged = True
                break
    if not converged and "precision_update_failed" not in flags:
        flags.append("no_convergence")
    return phi, E, it, converged, trace, flags, prec, den


def fgiv_supply_alg1(panel, p, shares, r: int = 2, cov_cfg: Optional[CovConfig] = None,
                     variance_kind: str = "hc", tol: float = 1e-6, max_iter: int = 100,
                     m: Optional[int] = None, lag_shares: bool = False,
                     factors: Optional[FactorEstimate] = None) -> ElasticityFit:
    """Iterative just-identified supply elasticity.

    Starts from equal precision weights, estimates the elasticity from the
    factor-partialled ratio ``z' M y_E / z' M p``, re-estimates the
    precision matrix from ``y_t - iota p_t phi`` and repeats until the
    elasticity changes by less than ``tol``.
    """
    cfg = cov_cfg or CovConfig()
    Y, Yd, fac, Q, z = _prepare(panel, shares, r, lag_shares, factors)
    p = as_vector(p)
    F = fac.factors
    Y, p, F = _trim(lag_shares, Y, p, F)
    T = Y.shape[0]
    phi, E, it, conv, trace, flags, prec, den = _alg1_loop(Y, p, z, F, cfg, fac.r, tol, max_iter)
    lags = _lags(variance_kind, m, T)
    yE = Y @ E
    uE = _partial(F, yE - phi * p)
    var = hac_variance(z, uE, lags) / (den / T) ** 2
    return _make_fit(
        phi, var, T, variance_kind, lags, instrument=z, iterations=it, converged=conv,
        trace=trace, flags=flags, first_stage=first_stage_diagnostics(p, np.column_stack([z, F])),
        extras={"e_weights": E, "precision_method": cfg.method, "r": fac.r},
    )


def misspecified_supply(panel, p, shares, r: int = 2, variance_kind: str = "hc",
                        m: Optional[int] = None, lag_shares: bool = False,
                        factors: Optional[FactorEstimate] = None) -> ElasticityFit:
    """Supply elasticity with equal precision weights, ``z' M ybar / z' M p``."""
    return fgiv_supply_alg1(panel, p, shares, r, CovConfig(method="identity"), variance_kind,
                            m=m, lag_shares=lag_shares, factors=factors)


def fgiv_supply_alg2(panel, p, shares, covariates, r: int = 2, cov_cfg: Optional[CovConfig] = None,
                     tol: float = 1e-6, max_iter: int = 100, variance_kind: str = "hc",
                     m: Optional[int] = None) -> ElasticityFit:
    """Iterative supply elasticity with unit-level covariates.

    Each outer step runs the precision-weighted OLS/PCA alternation for the
    covariate slopes and factors, rebuilds the instrument from the
    covariate-adjusted panel, updates the elasticity from
    ``z' M (y_E - x_E beta) / z' M p`` and re-estimates the precision matrix
    from ``y_t - iota p_t phi - x_t beta``. The slopes are in ``extras["beta"]``.
    """
    cfg = cov_cfg or CovConfig()
    Y = as_matrix(panel)
    p = as_vector(p)
    S = as_vector(shares)
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    T, N = Y.shape
    if X.shape[:2] != (T, N):
        raise DimensionMismatch("covariates must be T x N x k")
    active = np.flatnonzero(np.any(X != 0, axis=(0, 1)))
    if active.size == 0:
        fit = fgiv_supply_alg1(Y, p, S, r, cfg, variance_kind, tol, max_iter, m)
        fit.extras["beta"] = np.zeros(X.shape[2])
        return fit
    Xa = X[:, :, active]
    Yd = Y - Y.mean(axis=1, keepdims=True)
    Xd = Xa - Xa.mean(axis=1, keepdims=True)
    prec = identity_precision(N)
    E = prec.e_weights
    update = _PrecisionUpdater(cfg, r)
    phi = beta = None
    trace, flags = [], []
    converged = False
    for it in range(1, max_iter + 1):
        inner = iterative_ols_pca(Yd, Xd, r, prec, tol=tol * 1e-2, max_iter=500)
        beta_new = inner.beta
        F = inner.factors.factors
        Q = annihilator_matrix(inner.factors.loadings)
        z = construct_giv(Yd - Xd @ beta_new, Q, S).values
        zt = _partial(F, z)
        den = float(zt @ p)
        if abs(den) / T < WEAK_TOL:
            raise WeakDenominator("instrument orthogonal to price")
        dep = Y @ E - (Xa @ beta_new) @ E
        phi_new = float(zt @ dep) / den
        trace.append(phi_new)
        step = np.inf if phi is None else max(abs(phi_new - phi), np.max(np.abs(beta_new - beta)))
        phi, beta = phi_new, beta_new
        if step < tol or cfg.method == "identity":
            converged = True
            break
        try:
            prec = update(Y - np.outer(p, phi) - Xa @ beta)
        except (NotPositiveDefinite, NoFeasibleC):
            flags.append("precision_update_failed")
            break
        E = prec.e_weights
    if not converged and "precision_update_failed" not in flags:
        flags.append("no_convergence")
    lags = _lags(variance_kind, m, T)
    uE = _partial(F, Y @ E - (Xa @ beta) @ E - phi * p)
    var = hac_variance(z, uE, lags) / (den / T) ** 2
    full_beta = np.zeros(X.shape[2])
    full_beta[active] = beta
    return _make_fit(
        phi, var, T, variance_kind, lags, instrument=z, iterations=it, converged=converged,
        trace=trace, flags=flags + inner.flags,
        first_stage=first_stage_diagnostics(p, np.column_stack([z, F])),
        extras={"beta": full_beta, "e_weights": E, "precision_method": cfg.method, "r": r},
    )


def _gmm_supply(panel, p, d, shares, r, cfg, variance_kind, tol, max_iter, m, lag_shares,
                factors, fgl_residuals: bool):
    Y, Yd, fac, Q, z = _prepare(panel, shares, r, lag_shares, factors)
    p, d = as_vector(p), as_vector(d)
    F = fac.factors
    Y, p, d, F = _trim(lag_shares, Y, p, d, F)
    T, N = Y.shape
    lags = _lags(variance_kind, m, T)
    dem = gmm_demand(d, p, z, F, variance_kind, m)
    eps = d - dem.estimate * p
    Z = np.column_stack([z, eps, F])
    X = np.column_stack([p, F])
    ZX = Z.T @ X / T
    E = np.full(N, 1.0 / N)
    yE = Y @ E
    W, flags = _safe_inverse(Z.T @ Z / T)
    theta = np.linalg.solve(ZX.T @ W @ ZX, ZX.T @ W @ (Z.T @ yE / T))
    update = _PrecisionUpdater(cfg, fac.r)

    def resid_input(phi):
        R = Y - np.outer(p, phi)
        if fgl_residuals:
            # unit loadings from regressing the price-adjusted panel on the factors
            R = R - F @ (R.T @ F / T).T
        return R

    trace = [float(theta[0])]
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        yE = Y @ E
        u = yE - X @ theta
        W, f = _safe_inverse(long_run_covariance(Z * u[:, None], lags))
        flags += f
        new = np.linalg.solve(ZX.T @ W @ ZX, ZX.T @ W @ (Z.T @ yE / T))
        step = np.max(np.abs(new - theta))
        theta = new
        trace.append(float(theta[0]))
        if step < tol:
            converged = True
            break
        if cfg.method != "identity":
            try:
                E = update(resid_input(theta[0])).e_weights
            except (NotPositiveDefinite, NoFeasibleC):
                flags.append("precision_update_failed")
                break
    if not converged and "precision_update_failed" not in flags:
        flags.append("no_convergence")
    u = yE - X @ theta
    W, f = _safe_inverse(long_run_covariance(Z * u[:, None], lags))
    V = np.linalg.inv(ZX.T @ W @ ZX)
    g = Z.T @ u / T
    J = float(T * g @ W @ g)
    jt = JTest(J, 1, chi2_sf(J, 1))
    return _make_fit(
        theta[0], V[0, 0], T, variance_kind, lags, theta=theta, j_stat=jt, instrument=z,
        iterations=it, converged=converged, trace=trace, flags=sorted(set(flags + f)),
        first_stage=first_stage_diagnostics(p, Z),
        extras={"e_weights": E, "precision_method": cfg.method, "r": fac.r,
                "demand_estimate": dem.estimate},
    )


def gmm_supply_alg3(panel, p, d, shares, r: int = 2, cov_cfg: Optional[CovConfig] = None,
                    variance_kind: str = "hc", tol: float = 1e-6, max_iter: int = 100,
                    m: Optional[int] = None, lag_shares: bool = False,
                    factors: Optional[FactorEstimate] = None) -> ElasticityFit:
    """Efficient GMM supply elasticity with iterated precision weights.

    Instruments are the granular instrument, the demand residual from
    :func:`gmm_demand` and the factors; regressors are price and the factors.
    After a 2SLS start the loop alternates the optimal weight matrix, the GMM
    update of ``(phi, lambda_E)`` and a POET update of the precision weights
    until every parameter moves by less than ``tol``. ``theta`` holds the full
    parameter vector and the J statistic has one degree of freedom.
    """
    return _gmm_supply(panel, p, d, shares, r, cov_cfg or CovConfig(), variance_kind, tol,
                       max_iter, m, lag_shares, factors, fgl_residuals=False)


def gmm_supply_alg3prime(panel, p, d, shares, r: int = 2, cov_cfg: Optional[CovConfig] = None,
                         variance_kind: str = "hc", tol: float = 1e-6, max_iter: int = 100,
                         m: Optional[int] = None, lag_shares: bool = False,
                         factors: Optional[FactorEstimate] = None) -> ElasticityFit:
    """Efficient GMM supply elasticity with graphical-lasso precision updates.

    Same loop as :func:`gmm_supply_alg3`; the precision matrix is re-estimated
    by FGL on ``y_it - phi p_t - lambda_i' eta_t``.
    """
    cfg = cov_cfg or CovConfig(method="fgl")
    if cfg.method != "fgl":
        raise ConfigError("the graphical-lasso variant needs cov_cfg.method == 'fgl'")
    return _gmm_supply(panel, p, d, shares, r, cfg, variance_kind, tol, max_iter, m,
                       lag_shares, factors, fgl_residuals=True)


def gk_baselines(panel, p, d, shares, factors=None, r: int = 2, augment: bool = True,
                 variance_kind: str = "hc", m: Optional[int] = None) -> dict:
    """Comparison estimators built on ``Z_t = y_St - mean_i y_it``.

    Supply uses ``Z' M ybar / Z' M p`` and demand ``Z' M d / Z' M p`` where M
    partials out the estimated factors; ``augment=False`` drops the
    partialling.
    """
    Y = as_matrix(panel)
    p, d = as_vector(p), as_vector(d)
    S = as_vector(shares)
    ybar = Y.mean(axis=1)
    Z = Y @ S - ybar if S.ndim == 1 else np.einsum("tn,tn->t", Y, S) - ybar
    F = None
    if augment:
        if factors is None:
            factors = pca_factors(Y - ybar[:, None], r)
        F = _factor_matrix(factors)
    return {
        "supply": _ratio_iv(ybar, p, Z, F, variance_kind, m),
        "demand": _ratio_iv(d, p, Z, F, variance_kind, m),
    }
