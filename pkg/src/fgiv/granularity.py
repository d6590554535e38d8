"""Power-law size distributions, the Herfindahl index and tail-index estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateSample,
    InvalidMu,
    InvalidScale,
    MuOutOfRange,
    NotNormalized,
    TooFewTailObservations,
)

ZETA_TERMS = 10**6
TAIL_METHODS = (
    "mle",
    "ols_rank",
    "percentile",
    "modified_percentile",
    "geometric_percentile",
    "wls",
)
# (mu, N) pairs used by the simulation tables; each gives a Herfindahl of about 0.12
TABLE_MU = {30: 0.92, 50: 0.85, 100: 0.80, 200: 0.77, 500: 0.75}


@dataclass(frozen=True)
class SizeDistribution:
    raw_sizes: np.ndarray
    shares: np.ndarray
    mu: Optional[float] = None


@dataclass(frozen=True)
class TailRegime:
    case: str
    mu_range: tuple
    herfindahl_rate: str


def _check_mu(mu):
    if not (mu > 0 and math.isfinite(mu)):
        raise InvalidMu(f"tail index must be positive, got {mu}")


def deterministic_shares(N: int, mu: float) -> SizeDistribution:
    """Size grid ``(i/N)^(-1/mu)`` for i = 1..N and the implied shares."""
    if N < 2:
        raise ValueError("N must be at least 2")
    _check_mu(mu)
    i = np.arange(1, N + 1, dtype=float)
    # log form avoids overflow for small mu
    logs = -np.log(i / N) / mu
    raw = np.exp(logs)
    shares = np.exp(logs - logs.max())
    shares /= shares.sum()
    return SizeDistribution(raw, shares, float(mu))


def sample_pareto_sizes(N: int, mu: float, scale: float = 1.0, seed=None) -> SizeDistribution:
    """Draw i.i.d. pure-Pareto sizes by inverse CDF, ``scale * U^(-1/mu)``."""
    if N < 2:
        raise ValueError("N must be at least 2")
    _check_mu(mu)
    if not (scale > 0 and math.isfinite(scale)):
        raise InvalidScale(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    # 1 - U lies in (0, 1], so the draw never divides by zero
    u = 1.0 - rng.random(N)
    raw = scale * u ** (-1.0 / mu)
    return SizeDistribution(raw, raw / raw.sum(), float(mu))


def herfindahl(shares) -> float:
    """Sum of squared shares."""
    s = np.asarray(getattr(shares, "shares", shares), dtype=float)
    if s.ndim != 1 or np.any(s < 0) or abs(s.sum() - 1.0) > 1e-10:
        raise NotNormalized("shares must be nonnegative and sum to one")
    return float(s @ s)


def zeta(s: float, terms: int = ZETA_TERMS) -> float:
    """Riemann zeta for real s > 1.

    Direct summation of the first ``terms`` terms plus an Euler-Maclaurin tail
    (integral, half-term and first derivative correction). The neglected
    remainder is of order s^3 * terms^(-s-3), below 1e-18 for the defaults.
    """
    if s <= 1:
        raise ValueError("zeta needs s > 1")
    n = np.arange(terms, 0, -1, dtype=float)
    head = float(np.sum(n ** (-s)))
    K = float(terms)
    tail = K ** (1 - s) / (s - 1) - 0.5 * K ** (-s) + s * K ** (-s - 1) / 12.0
    return head + tail


def asymptotic_herfindahl_limit(mu: float) -> float:
    """Limit of the Herfindahl of the deterministic grid for 0 < mu < 1."""
    if not (0 < mu < 1):
        raise MuOutOfRange(f"limit defined for 0 < mu < 1, got {mu}")
    return zeta(2.0 / mu) / zeta(1.0 / mu) ** 2


def classify_tail_regime(mu: float, slowly_varying: bool = False) -> TailRegime:
    """Herfindahl decay regime for a given tail index.

    Boundary values mu = 1 and mu = 2 get their own cases. The slowly varying
    case is only returned when ``slowly_varying`` is set.
    """
    if slowly_varying:
        return TailRegime("VI", (0.0, 0.0), "Theta_p(1)")
    if mu < 0 or not math.isfinite(mu):
        raise InvalidMu(f"tail index must be >= 0, got {mu}")
    if mu > 2:
        return TailRegime("I", (2.0, math.inf), "1/sqrt(N)")
    if mu == 2:
        return TailRegime("II", (2.0, 2.0), "sqrt(log(N)/N)")
    if mu > 1:
        return TailRegime("III", (1.0, 2.0), "N^{-(1-1/mu)}")
    if mu == 1:
        return TailRegime("IV", (1.0, 1.0), "1/log(N)")
    return TailRegime("V", (0.0, 1.0), "Theta_p(1)")


def _percentile_mu(x: np.ndarray, p: float, q: float) -> float:
    if not (0 < p < q < 1):
        raise ValueError("percentile pair needs 0 < p < q < 1")
    lo, hi = np.quantile(x, [p, q])
    if hi <= lo:
        raise DegenerateSample("quantiles coincide")
    return math.log((1 - p) / (1 - q)) / math.log(hi / lo)


def _rank_regression(tail: np.ndarray, weighted: bool) -> float:
    k = tail.size
    rank = np.arange(1, k + 1, dtype=float)
    yv = np.log(rank - 0.5)
    xv = np.log(tail)
    w = rank if weighted else np.ones(k)
    xm = np.average(xv, weights=w)
    ym = np.average(yv, weights=w)
    slope = np.sum(w * (xv - xm) * (yv - ym)) / np.sum(w * (xv - xm) ** 2)
    return -slope


GEOMETRIC_PAIRS = tuple((p, q) for p in (0.5, 0.6, 0.7, 0.8) for q in (0.9, 0.95, 0.99))


def estimate_tail_index(
    sizes,
    method: str = "mle",
    tail_fraction: float = 0.1,
    percentiles: Optional[tuple] = None,
    min_tail: int = 10,
) -> float:
    """Estimate the Pareto tail index of a size sample.

    Parameters
    ----------
    sizes : array_like
        Positive sizes.
    method : str
        ``mle`` (Hill on the top order statistics), ``ols_rank`` (regression
        of log(rank - 1/2) on log size), ``wls`` (same, weighted by rank),
        ``percentile`` (quantile pair 0.75/0.95), ``modified_percentile``
        (0.5/0.9) or ``geometric_percentile`` (geometric mean over a grid of
        pairs).
    tail_fraction : float
        Share of the largest observations used by the rank-based methods.
    percentiles : tuple, optional
        Quantile pair overriding the default of the percentile methods.
    min_tail : int
        Minimum number of observations above the cutoff.

    Returns
    -------
    float
        Estimated tail index, positive.
    """
    x = np.asarray(sizes, dtype=float).ravel()
    if np.any(~np.isfinite(x)) or np.any(x <= 0):
        raise ValueError("sizes must be positive and finite")
    if x.size == 0 or np.ptp(np.log(x)) == 0:
        raise DegenerateSample("all sizes are equal")
    if method not in TAIL_METHODS:
        raise ValueError(f"unknown method {method!r}")
    desc = np.sort(x)[::-1]

    if method in ("mle", "ols_rank", "wls"):
        if not 0 < tail_fraction <= 1:
            raise ValueError("tail_fraction must lie in (0, 1]")
        k = int(math.floor(tail_fraction * x.size))
        if k < min_tail:
            raise TooFewTailObservations(f"{k} tail observations, need {min_tail}")
        if method == "mle":
            # threshold is the (k+1)-th largest, or the minimum when k = n
            cut = desc[k] if k < x.size else desc[-1]
            logs = np.log(desc[:k] / cut)
            if logs.sum() <= 0:
                raise DegenerateSample("no spread above the tail cutoff")
            return float(k / logs.sum())
        tail = desc[:k]
        if np.ptp(np.log(tail)) == 0:
            raise DegenerateSample("no spread above the tail cutoff")
        return float(_rank_regression(tail, weighted=method == "wls"))

    defaults = {"percentile": (0.75, 0.95), "modified_percentile": (0.5, 0.9)}
    pairs = [percentiles] if percentiles is not None else (
        GEOMETRIC_PAIRS if method == "geometric_percentile" else [defaults[method]]
    )
    lowest = min(p for p, _ in pairs)
    if np.sum(x > np.quantile(x, lowest)) < min_tail:
        raise TooFewTailObservations("too few observations above the lower quantile")
    ests = np.array([_percentile_mu(x, p, q) for p, q in pairs])
    return float(np.exp(np.mean(np.log(ests))))


def size_rank_table(sizes) -> np.ndarray:
    """(log rank, log size) pairs for a size-rank plot, largest unit first."""
    desc = np.sort(np.asarray(sizes, dtype=float))[::-1]
    rank = np.arange(1, desc.size + 1, dtype=float)
    return np.column_stack([np.log(rank), np.log(desc)])


def mu_for_herfindahl(N: int, target: float = 0.12) -> float:
    """Tail index whose deterministic grid has the requested Herfindahl."""
    from scipy.optimize import brentq

    if not (1.0 / N < target < 1.0):
        raise ValueError("target must lie in (1/N, 1)")
    f = lambda m: herfindahl(deterministic_shares(N, m).shares) - target
    return float(brentq(f, 0.05, 50.0, xtol=1e-12))
