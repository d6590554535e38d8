"""Idiosyncratic covariance and precision estimation.

POET keeps the top principal components of the sample second moment and
thresholds the remainder entrywise. FGL solves a weighted graphical lasso on
factor-adjusted residuals by block coordinate descent on the precision matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla
from numba import njit

from .errors import InvalidRho, NoFeasibleC, NotPositiveDefinite
from .factors import time_side_eigenvectors
from .panel import as_matrix

PIVOT_TOL = 1e-12
DEFAULT_C_GRID = tuple(np.arange(0.5, 3.0 + 1e-9, 0.25).round(2))


@dataclass(frozen=True)
class PrecisionEstimate:
    sigma: np.ndarray
    theta: np.ndarray
    e_weights: np.ndarray
    method: str
    threshold_constant: Optional[float] = None
    rho: Optional[float] = None
    sparsity: dict = field(default_factory=dict)
    converged: bool = True
    iterations: int = 0
    objective_trace: tuple = ()


def spd_inverse(sigma: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky.

    Fails when any pivot falls below ``PIVOT_TOL * trace / N``.
    """
    n = sigma.shape[0]
    try:
        c = sla.cholesky(sigma, lower=True)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("Cholesky factorization failed") from None
    pivots = np.diag(c) ** 2
    if pivots.min() <= PIVOT_TOL * np.trace(sigma) / n:
        raise NotPositiveDefinite(f"pivot {pivots.min():.3g} below tolerance")
    inv = sla.cho_solve((c, True), np.eye(n))
    return 0.5 * (inv + inv.T)


def precision_weights(theta) -> np.ndarray:
    """``theta iota / (iota' theta iota)``."""
    th = np.asarray(getattr(theta, "theta", theta), dtype=float)
    if not np.allclose(th, th.T, rtol=1e-10, atol=1e-12 * np.abs(th).max()):
        raise NotPositiveDefinite("precision matrix is not symmetric")
    try:
        np.linalg.cholesky(th)
    except np.linalg.LinAlgError:
        raise NotPositiveDefinite("precision matrix is not positive definite") from None
    row = th.sum(axis=1)
    return row / row.sum()


def identity_precision(N: int) -> PrecisionEstimate:
    eye = np.eye(N)
    return PrecisionEstimate(eye, eye.copy(), np.full(N, 1.0 / N), "identity")


def omega_rate(N: int, T: int, r: int = 1) -> float:
    """Threshold rate; the 1/sqrt(N) term accounts for estimated factors."""
    return float(np.sqrt(np.log(N) / T) + (1.0 / np.sqrt(N) if r > 0 else 0.0))


def _split(X: np.ndarray, r: int):
    """Low-rank part, remainder and PCA residuals of the second moment X'X/T."""
    T, N = X.shape
    S = X.T @ X / T
    if r == 0:
        return np.zeros_like(S), S, X
    vals, V = time_side_eigenvectors(X, r)  # X X' side; map to unit side
    W = X.T @ V / np.sqrt(np.maximum(vals, np.finfo(float).tiny))
    low = (W * (vals / T)) @ W.T
    U = X - (X @ W) @ W.T
    return low, S - low, U


def _threshold(R: np.ndarray, U: np.ndarray, c_const: float, shrink: str, r: int) -> np.ndarray:
    T, N = U.shape
    U2 = U * U
    alpha = np.maximum(U2.T @ U2 / T - R * R, 0.0)
    tau = c_const * omega_rate(N, T, r) * np.sqrt(alpha)
    if shrink == "hard":
        out = np.where(np.abs(R) >= tau, R, 0.0)
    elif shrink == "soft":
        out = np.sign(R) * np.maximum(np.abs(R) - tau, 0.0)
    else:
        raise ValueError(f"unknown shrinkage {shrink!r}")
    np.fill_diagonal(out, np.diag(R))
    return out


def _poet_sigma(X: np.ndarray, r: int, shrink: str, c_const: float):
    low, R, U = _split(X, r)
    Rt = _threshold(R, U, c_const, shrink, r)
    sigma = low + Rt
    return 0.5 * (sigma + sigma.T), Rt


def poet_covariance(residual_input, r: int, shrink: str = "soft", c_const: float = 1.0,
                    q: float = 0.0) -> PrecisionEstimate:
    """POET covariance, precision and precision weights.

    Parameters
    ----------
    residual_input : array_like, shape (T, N)
        Typically ``y_t - iota p_t phi`` inside the supply iterations.
    r : int
        Number of principal components kept unthresholded.
    shrink : {"soft", "hard"}
    c_const : float
        Threshold constant; ``tau_ij = C omega_T sqrt(alpha_ij)``.
    q : float
        Exponent of the reported row-sparsity diagnostic.
    """
    X = as_matrix(residual_input)
    T, N = X.shape
    if not (0 <= r < N and r < T):
        raise ValueError("need 0 <= r < N and r < T")
    sigma, Rt = _poet_sigma(X, r, shrink, c_const)
    theta = spd_inverse(sigma)
    off = Rt - np.diag(np.diag(Rt))
    m_n = float(np.max(np.sum(np.abs(off) ** q if q > 0 else (off != 0), axis=1)))
    return PrecisionEstimate(
        sigma, theta, precision_weights(theta), "poet", threshold_constant=float(c_const),
        sparsity={"q": q, "omega": omega_rate(N, T, r), "m_n": m_n},
    )


def _folds(T: int, folds: int):
    edges = np.linspace(0, T, folds + 1).round().astype(int)
    for a, b in zip(edges[:-1], edges[1:]):
        test = np.zeros(T, bool)
        test[a:b] = True
        yield ~test, test


def cross_validate_threshold(residual_input, r: int, shrink: str = "soft", folds: int = 5,
                             grid: Sequence[float] = DEFAULT_C_GRID) -> float:
    """Choose the POET threshold constant by contiguous-block cross-validation.

    The loss is the Frobenius distance between the thresholded remainder on
    the training block and the raw remainder on the held-out block. Grid
    points whose full-sample estimate is not positive definite are skipped.
    """
    X = as_matrix(residual_input)
    grid = list(grid)
    if not grid:
        raise ValueError("empty grid")
    if folds < 2:
        raise ValueError("need at least two folds")
    splits = [(X[tr], X[te]) for tr, te in _folds(X.shape[0], folds)]
    held = [_split(te, r)[1] for _, te in splits]
    parts = [_split(tr, r) for tr, _ in splits]
    full = _split(X, r)
    best, best_loss = None, np.inf
    for c in sorted(grid):
        sig = full[0] + _threshold(full[1], full[2], c, shrink, r)
        try:
            spd_inverse(0.5 * (sig + sig.T))
        except NotPositiveDefinite:
            continue
        loss = 0.0
        for (low, R, U), Rte in zip(parts, held):
            loss += np.sum((_threshold(R, U, c, shrink, r) - Rte) ** 2)
        if loss < best_loss - 1e-12 * abs(best_loss if np.isfinite(best_loss) else 0):
            best, best_loss = c, loss
    if best is None:
        raise NoFeasibleC("no threshold constant in the grid gives a positive definite estimate")
    return float(best)


@njit(cache=True)
def _fgl_sweep(S, P, Theta, W, inner_tol, inner_max):
    # One pass of primal block coordinate descent over all columns.
    # For column j the exact minimizer over (theta_12, theta_22) reduces to the
    # lasso  min s22 b'A b + 2 s12'b + 2 sum P_kj |b_k|  with A = inv(Theta_11).
    n = S.shape[0]
    A = np.empty((n, n))
    b = np.empty(n)
    Ab = np.empty(n)
    for j in range(n):
        wjj = W[j, j]
        for k in range(n):
            for l in range(n):
                A[k, l] = W[k, l] - W[k, j] * W[l, j] / wjj
        s22 = S[j, j]
        for k in range(n):
            b[k] = Theta[k, j] if k != j else 0.0
        for k in range(n):
            acc = 0.0
            for l in range(n):
                if l != j:
                    acc += A[k, l] * b[l]
            Ab[k] = acc
        for _ in range(inner_max):
            delta = 0.0
            for k in range(n):
                if k == j:
                    continue
                akk = A[k, k]
                g = s22 * (Ab[k] - akk * b[k]) + S[k, j]
                pen = P[k, j]
                if g > pen:
                    new = -(g - pen) / (s22 * akk)
                elif g < -pen:
                    new = -(g + pen) / (s22 * akk)
                else:
                    new = 0.0
                d = new - b[k]
                if d != 0.0:
                    for l in range(n):
                        Ab[l] += A[l, k] * d
                    b[k] = new
                    if abs(d) > delta:
                        delta = abs(d)
            if delta < inner_tol:
                break
        quad = 0.0
        for k in range(n):
            if k != j:
                quad += b[k] * Ab[k]
        for k in range(n):
            if k != j:
                Theta[k, j] = b[k]
                Theta[j, k] = b[k]
        Theta[j, j] = 1.0 / s22 + quad
        # block inverse update: W_22 = s22, w_12 = -s22 A b, W_11 = A + s22 (A b)(A b)'
        for k in range(n):
            if k == j:
                continue
            for l in range(n):
                if l == j:
                    continue
                W[k, l] = A[k, l] + s22 * Ab[k] * Ab[l]
            W[k, j] = -s22 * Ab[k]
            W[j, k] = -s22 * Ab[k]
        W[j, j] = s22


def fgl_objective(theta: np.ndarray, S: np.ndarray, P: np.ndarray) -> float:
    """``-log det theta + tr(S theta) + sum_{i != j} P_ij |theta_ij|``."""
    c = np.linalg.cholesky(theta)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    off = np.abs(theta) * P
    return float(-logdet + np.sum(S * theta) + off.sum() - np.trace(off))


def _penalty(S: np.ndarray, rho: float, weighted: bool) -> np.ndarray:
    if weighted:
        d = np.sqrt(np.diag(S))
        P = rho * np.outer(d, d)
    else:
        P = np.full(S.shape, float(rho))
    np.fill_diagonal(P, 0.0)
    return P


def graphical_lasso(S: np.ndarray, rho: float, weighted: bool = True, tol: float = 1e-6,
                    max_iter: int = 200, inner_tol: float = 1e-8, inner_max: int = 1000):
    """Weighted graphical lasso on a covariance matrix.

    Returns ``(theta, converged, iterations, objective_trace)``. The objective
    is checked to be non-increasing after every sweep.
    """
    S = np.asarray(S, dtype=float)
    if not (rho >= 0 and np.isfinite(rho)):
        raise InvalidRho(f"rho must be a nonnegative number, got {rho}")
    if np.any(np.diag(S) <= 0):
        raise NotPositiveDefinite("sample variances must be positive")
    if rho == 0:
        theta = spd_inverse(S)
        return theta, True, 0, (fgl_objective(theta, S, np.zeros_like(S)),)
    P = _penalty(S, rho, weighted)
    Theta = np.diag(1.0 / np.diag(S))
    W = np.diag(np.diag(S)).astype(float)
    trace = [fgl_objective(Theta, S, P)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        old = Theta.copy()
        _fgl_sweep(S, P, Theta, W, inner_tol, inner_max)
        obj = fgl_objective(Theta, S, P)
        # inner solves are inexact at the inner_tol level
        assert obj <= trace[-1] + 1e-8 * (1.0 + abs(trace[-1])), "objective increased"
        trace.append(obj)
        if np.max(np.abs(Theta - old)) < tol:
            converged = True
            break
    Theta = 0.5 * (Theta + Theta.T)
    return Theta, converged, it, tuple(trace)


def fgl_precision(residuals, rho: float, weighted: bool = True, tol: float = 1e-6,
                  max_iter: int = 200) -> PrecisionEstimate:
    """Factor-adjusted graphical lasso precision from residuals (T x N)."""
    U = as_matrix(residuals)
    T, N = U.shape
    if T < 2:
        raise ValueError("need T >= 2")
    S = U.T @ U / T
    theta, conv, it, trace = graphical_lasso(S, rho, weighted, tol, max_iter)
    sigma = spd_inverse(theta)
    return PrecisionEstimate(
        sigma, theta, precision_weights(theta), "fgl", rho=float(rho), converged=conv,
        iterations=it, objective_trace=trace,
        sparsity={"weighted": weighted, "nonzero_offdiag": int(np.sum(np.abs(theta) > 0) - N)},
    )


def cross_validate_rho(residuals, grid: Sequence[float], folds: int = 5, weighted: bool = True) -> float:
    """Choose the FGL penalty by held-out Gaussian negative log-likelihood."""
    U = as_matrix(residuals)
    grid = sorted(grid)
    if not grid:
        raise ValueError("empty grid")
    if len(grid) == 1:
        return float(grid[0])
    best, best_loss = None, np.inf
    for rho in grid:
        loss = 0.0
        try:
            for tr, te in _folds(U.shape[0], folds):
                Str = U[tr].T @ U[tr] / tr.sum()
                Ste = U[te].T @ U[te] / te.sum()
                theta = graphical_lasso(Str, rho, weighted)[0]
                c = np.linalg.cholesky(theta)
                loss += np.sum(Ste * theta) - 2.0 * np.sum(np.log(np.diag(c)))
        except (NotPositiveDefinite, np.linalg.LinAlgError):
            continue
        if loss < best_loss:
            best, best_loss = rho, loss
    if best is None:
        raise NoFeasibleC("no penalty in the grid gives a positive definite estimate")
    return float(best)
