"""Principal-component factor estimation and related projections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import (
    EigenFailure,
    KmaxTooLarge,
    RankDeficientLoadings,
    RankTooLarge,
    SingularDesign,
    ZeroLoadingPeriod,
)
from .panel import AggregateSeries, as_matrix

# relative size below which an eigenvalue counts as zero in the ER/GR ratios
EIG_FLOOR = 1e-14


@dataclass(frozen=True)
class FactorEstimate:
    """Factors (T x r) with ``F'F/T = I`` and loadings (N x r)."""

    factors: np.ndarray
    loadings: np.ndarray
    eigenvalues: np.ndarray
    r: int
    normalization: str = "factors_orthonormal_scaled"

    def common_component(self) -> np.ndarray:
        return self.factors @ self.loadings.T


@dataclass(frozen=True)
class AnnihilatorMatrix:
    q: np.ndarray

    def __matmul__(self, other):
        return self.q @ other


def _top_eigh(G: np.ndarray, k: int):
    """Largest k eigenpairs of a symmetric matrix, in descending order."""
    n = G.shape[0]
    try:
        vals, vecs = sla.eigh(G, subset_by_index=[n - k, n - 1])
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise EigenFailure(str(exc)) from exc
    return vals[::-1], vecs[:, ::-1]


def time_side_eigenvectors(Y: np.ndarray, k: int):
    """Top-k eigenpairs of ``Y Y'`` (T x T) through the smaller Gram matrix.

    Returns eigenvalues of ``Y Y'`` and orthonormal T-vectors.
    """
    T, N = Y.shape
    if T <= N:
        return _top_eigh(Y @ Y.T, k)
    vals, W = _top_eigh(Y.T @ Y, k)
    # Y'Y w = g w  implies  (Y Y')(Y w) = g (Y w), with |Y w|^2 = g
    V = Y @ W / np.sqrt(np.maximum(vals, np.finfo(float).tiny))
    return vals, V


def gram_eigenvalues(Y: np.ndarray) -> np.ndarray:
    """All min(N, T) eigenvalues of ``Y Y' / (N T)`` in descending order."""
    T, N = Y.shape
    G = Y @ Y.T if T <= N else Y.T @ Y
    try:
        vals = sla.eigh(G, eigvals_only=True)
    except np.linalg.LinAlgError as exc:
        raise EigenFailure(str(exc)) from exc
    return np.maximum(vals[::-1], 0.0) / (N * T)


def _fix_signs(F: np.ndarray, L: np.ndarray):
    idx = np.argmax(np.abs(L), axis=0)
    sgn = np.sign(L[idx, np.arange(L.shape[1])])
    sgn[sgn == 0] = 1.0
    return F * sgn, L * sgn


def pca_factors(demeaned, r: int) -> FactorEstimate:
    """Principal-component factors of a cross-sectionally demeaned panel.

    Factors are ``sqrt(T)`` times the top-r eigenvectors of ``Y Y'/(N T)``
    and loadings are ``Y' F / T``. Each loading column is signed so that its
    largest-magnitude entry is positive.
    """
    Y = as_matrix(demeaned)
    T, N = Y.shape
    if not (1 <= r < min(N, T)):
        raise RankTooLarge(f"need 1 <= r < min(N, T) = {min(N, T)}, got r={r}")
    vals, V = time_side_eigenvectors(Y, r)
    F = np.sqrt(T) * V
    L = Y.T @ F / T
    F, L = _fix_signs(F, L)
    return FactorEstimate(F, L, np.maximum(vals, 0.0) / (N * T), r)


@dataclass
class FactorCount:
    r_er: int
    r_gr: int
    er_values: np.ndarray
    gr_values: np.ndarray
    eigenvalues: np.ndarray
    flags: list = field(default_factory=list)


def select_num_factors(demeaned, kmax: int) -> FactorCount:
    """Eigenvalue-ratio (ER) and growth-ratio (GR) choice of the factor count.

    Ratios whose denominator is below ``EIG_FLOOR`` times the leading
    eigenvalue count as +inf; ties go to the smallest k. Flags mark an argmax
    at k = 1 (the criteria cannot return 0) or at ``kmax``.
    """
    Y = as_matrix(demeaned)
    T, N = Y.shape
    m = min(N, T)
    if not (1 <= kmax <= m - 2):
        raise KmaxTooLarge(f"need 1 <= kmax <= min(N, T) - 2 = {m - 2}")
    mu = gram_eigenvalues(Y)
    floor = EIG_FLOOR * max(mu[0], np.finfo(float).tiny)
    tails = np.concatenate([np.cumsum(mu[::-1])[::-1][1:], [0.0]])  # V(k) = sum_{j>k}

    def ratio(a, b):
        return np.inf if b < floor else a / b

    def star(k):  # k is 1-based
        return np.inf if tails[k - 1] < floor else mu[k - 1] / tails[k - 1]

    er = np.array([ratio(mu[k - 1], mu[k]) for k in range(1, kmax + 1)])
    gr = np.empty(kmax)
    for k in range(1, kmax + 1):
        if mu[k] < floor:
            gr[k - 1] = np.inf
        else:
            gr[k - 1] = ratio(np.log1p(star(k)), np.log1p(star(k + 1)))
    r_er = int(np.argmax(er)) + 1
    r_gr = int(np.argmax(gr)) + 1
    flags = []
    for name, val in (("er", r_er), ("gr", r_gr)):
        if val == 1:
            flags.append(f"{name}_argmax_at_one")
        if val == kmax:
            flags.append(f"{name}_argmax_at_kmax")
    return FactorCount(r_er, r_gr, er, gr, mu, flags)


def annihilator_matrix(loadings, include_constant: bool = True, tol: float = 1e-10) -> AnnihilatorMatrix:
    """Projection onto the orthogonal complement of the loading space.

    With ``include_constant`` the unit vector is appended to the span when it
    is not already there, so that ``iota' Q S = 0`` holds exactly for any
    shares. Demeaned loadings are orthogonal to the unit vector, so this leaves
    ``Q`` applied to a demeaned panel unchanged.
    """
    L = np.asarray(loadings, dtype=float)
    if L.ndim == 1:
        L = L[:, None]
    N, r = L.shape
    if r >= N:
        raise RankDeficientLoadings(f"{r} loading columns leave no null space in dimension {N}")
    U, s, _ = np.linalg.svd(L, full_matrices=False)
    if s.size == 0 or s[-1] <= tol * s[0]:
        raise RankDeficientLoadings("loadings are not of full column rank")
    if include_constant:
        iota = np.ones(N) / np.sqrt(N)
        resid = iota - U @ (U.T @ iota)
        nr = np.linalg.norm(resid)
        if nr > 1e-8:
            U = np.column_stack([U, resid / nr])
    q = np.eye(N) - U @ U.T
    return AnnihilatorMatrix(0.5 * (q + q.T))


def observed_loading_factor(demeaned, loading_column):
    """Per-period cross-sectional regression on observed loadings.

    Returns the factor series and the panel net of the fitted component.
    """
    Y = as_matrix(demeaned)
    T, N = Y.shape
    o = np.asarray(loading_column, dtype=float)
    if o.ndim == 1:
        o = np.broadcast_to(o, (T, N))
    if o.shape != (T, N):
        raise ValueError("loadings must be an N-vector or a T x N matrix")
    od = o - o.mean(axis=1, keepdims=True)
    ss = np.einsum("tn,tn->t", od, od)
    scale = np.maximum(np.einsum("tn,tn->t", o, o), 1.0)
    bad = np.flatnonzero(ss <= 1e-24 * scale)
    if bad.size:
        raise ZeroLoadingPeriod(f"demeaned loadings vanish in period index {bad[0]}")
    eta = np.einsum("tn,tn->t", od, Y) / ss
    return AggregateSeries(eta, "observed_factor"), Y - eta[:, None] * od


@dataclass
class OlsPcaResult:
    beta: np.ndarray
    factors: FactorEstimate
    iterations: int
    converged: bool
    identification_ratio: float
    flags: list = field(default_factory=list)


def _weighted_pca(R: np.ndarray, chol: np.ndarray, r: int) -> FactorEstimate:
    T, N = R.shape
    B = R @ chol  # B B' = R Theta R'
    vals, V = time_side_eigenvectors(B, r)
    F = np.sqrt(T) * V
    L = R.T @ F / T
    F, L = _fix_signs(F, L)
    return FactorEstimate(F, L, np.maximum(vals, 0.0) / (N * T), r)


def iterative_ols_pca(demeaned, covariates, r: int, precision=None, tol: float = 1e-6,
                      max_iter: int = 100) -> OlsPcaResult:
    """Joint estimation of covariate slopes and latent factors.

    Alternates a precision-weighted PCA of ``Y - X beta`` with the GLS slope
    update ``beta = (sum X_t' Theta X_t)^-1 sum X_t' Theta (Y_t - L F_t)``.

    Parameters
    ----------
    demeaned : array_like, shape (T, N)
    covariates : array_like, shape (T, N, k)
        Demeaned cross-sectionally inside the function.
    precision : PrecisionEstimate or ndarray, optional
        Weighting matrix; identity when omitted.
    """
    Y = as_matrix(demeaned)
    T, N = Y.shape
    X = np.asarray(covariates, dtype=float)
    if X.ndim == 2:
        X = X[:, :, None]
    if X.shape[:2] != (T, N):
        raise ValueError("covariates must be T x N x k")
    X = X - X.mean(axis=1, keepdims=True)
    theta = getattr(precision, "theta", precision)
    theta = np.eye(N) if theta is None else np.asarray(theta, dtype=float)
    chol = np.linalg.cholesky(theta)
    XT = np.einsum("tnk,nm->tmk", X, theta)
    A = np.einsum("tnk,tnl->kl", X, XT)
    evA = np.linalg.eigvalsh(A)
    if evA[-1] <= 0 or evA[0] <= 1e-12 * evA[-1]:
        raise SingularDesign("covariate cross-product matrix is singular")
    k = X.shape[2]
    beta = np.zeros(k)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        R = Y - X @ beta
        fac = _weighted_pca(R, chol, r)
        target = Y - fac.common_component()
        new = np.linalg.solve(A, np.einsum("tnk,tn->k", XT, target))
        step = np.max(np.abs(new - beta))
        beta = new
        if step < tol:
            converged = True
            break
    fac = _weighted_pca(Y - X @ beta, chol, r)
    # slope identification: covariates must keep variation outside the loading span
    L = fac.loadings
    TL = theta @ L
    P = TL @ np.linalg.solve(L.T @ TL, TL.T)
    AQ = A - np.einsum("tnk,nm,tml->kl", X, P, X)
    ratio = float(np.linalg.eigvalsh(AQ)[0] / evA[-1])
    flags = [] if converged else ["no_convergence"]
    if ratio < 1e-8:
        raise SingularDesign("covariates lie in the span of the estimated loadings")
    if ratio < 1e-3:
        flags.append("near_singular_design")
    return OlsPcaResult(beta, fac, it, converged, ratio, flags)
