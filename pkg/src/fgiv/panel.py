"""Balanced panels, share weights, aggregation and CSV ingestion."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    DuplicateCell,
    MissingCell,
    NonNumericValue,
    NotNormalized,
)

SHARE_TOL = 1e-10


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Panel:
    """Balanced T x N panel, rows are periods and columns are units."""

    values: np.ndarray
    unit_ids: tuple = ()
    time_ids: tuple = ()

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=float)
        if v.ndim != 2:
            raise DimensionMismatch("panel values must be a 2-d array")
        T, N = v.shape
        if N < 2 or T < 2:
            raise DimensionMismatch(f"panel needs N >= 2 and T >= 2, got T={T}, N={N}")
        if not np.all(np.isfinite(v)):
            raise MissingCell("panel contains non-finite entries")
        units = tuple(self.unit_ids) if len(self.unit_ids) else tuple(str(i) for i in range(1, N + 1))
        times = tuple(self.time_ids) if len(self.time_ids) else tuple(str(t) for t in range(1, T + 1))
        if len(units) != N or len(times) != T:
            raise DimensionMismatch("label lengths do not match panel shape")
        if len(set(units)) != N:
            raise DuplicateCell("unit ids are not unique")
        if len(set(times)) != T:
            raise DuplicateCell("time ids are not unique")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "time_ids", times)

    @property
    def shape(self):
        return self.values.shape

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ShareSeries:
    """Nonnegative weights summing to one, static (N,) or time varying (T, N)."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim not in (1, 2):
            raise DimensionMismatch("shares must be an N-vector or a T x N matrix")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise NotNormalized("shares must be finite and nonnegative")
        sums = w.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > SHARE_TOL):
            raise NotNormalized(f"shares must sum to 1 within {SHARE_TOL}")
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def mode(self) -> str:
        return "static" if self.weights.ndim == 1 else "time_varying"

    @property
    def N(self) -> int:
        return self.weights.shape[-1]

    @classmethod
    def normalized(cls, raw) -> "ShareSeries":
        raw = np.asarray(raw, dtype=float)
        return cls(raw / raw.sum(axis=-1, keepdims=True))


@dataclass(frozen=True)
class AggregateSeries:
    """A role-tagged time series such as d_t, p_t or an instrument."""

    values: np.ndarray
    label: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise DimensionMismatch("aggregate series must be one-dimensional")
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self):
        return self.values.shape[0]


def as_matrix(x) -> np.ndarray:
    """Return the raw T x N array behind a Panel or array-like."""
    if isinstance(x, Panel):
        return x.values
    return np.asarray(x, dtype=float)


def as_vector(x) -> np.ndarray:
    if isinstance(x, AggregateSeries):
        return x.values
    if isinstance(x, ShareSeries):
        return x.weights
    return np.asarray(x, dtype=float)


def demean_cross_section(p):
    """Subtract the cross-sectional mean from every period.

    Returns the same container type as the input (Panel or ndarray).
    """
    v = as_matrix(p)
    out = v - v.mean(axis=1, keepdims=True)
    if isinstance(p, Panel):
        return Panel(out, p.unit_ids, p.time_ids)
    return out


def aggregate(p, w, label: str = "") -> AggregateSeries:
    """Weighted cross-sectional sum ``sum_i w_i X_it`` for every period.

    Parameters
    ----------
    p : Panel or array_like, shape (T, N)
    w : ShareSeries or array_like
        Either an N-vector or a T x N matrix of period-specific weights.
    """
    v = as_matrix(p)
    weights = as_vector(w)
    T, N = v.shape
    if weights.shape[-1] != N:
        raise DimensionMismatch(f"weights have {weights.shape[-1]} units, panel has {N}")
    if weights.ndim == 1:
        out = v @ weights
    elif weights.shape == (T, N):
        out = np.einsum("tn,tn->t", v, weights)
    else:
        raise DimensionMismatch("time-varying weights must be T x N")
    return AggregateSeries(out, label)


def market_clearing_residual(p, s, d) -> AggregateSeries:
    """Return ``y_St - d_t`` for every period."""
    d = as_vector(d)
    ys = aggregate(p, s).values
    if d.shape != ys.shape:
        raise DimensionMismatch("demand series length differs from panel T")
    return AggregateSeries(ys - d, "clearing_residual")


def _sort_labels(labels: Iterable[str]) -> list:
    labels = list(labels)
    try:
        keys = [float(x) for x in labels]
    except ValueError:
        return sorted(labels)
    if any(math.isnan(k) for k in keys):
        return sorted(labels)
    return [x for _, x in sorted(zip(keys, labels))]


def _to_float(raw: str, where: str) -> float:
    try:
        val = float(raw)
    except (TypeError, ValueError):
        raise NonNumericValue(f"non-numeric value {raw!r} at {where}") from None
    if not math.isfinite(val):
        raise NonNumericValue(f"non-finite value {raw!r} at {where}")
    return val


def _read_text(source) -> str:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source).decode("utf-8-sig")
    if hasattr(source, "read"):
        data = source.read()
        return data.decode("utf-8-sig") if isinstance(data, bytes) else data
    with open(source, "rb") as fh:
        return fh.read().decode("utf-8-sig")


def load_panel_csv(source, layout: str = "long") -> Panel:
    """Read a balanced panel from CSV.

    Parameters
    ----------
    source : bytes, path or file-like
    layout : {"long", "wide"}
        ``long`` expects columns ``unit,time,value``; ``wide`` expects a
        ``time`` column followed by one column per unit.

    Raises
    ------
    MissingCell, DuplicateCell, NonNumericValue
    """
    rows = list(csv.reader(io.StringIO(_read_text(source))))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise MissingCell("empty CSV")
    header = [h.strip() for h in rows[0]]
    cells = {}
    if layout == "long":
        try:
            iu, it, iv = header.index("unit"), header.index("time"), header.index("value")
        except ValueError:
            raise MissingCell("long layout needs columns unit,time,value") from None
        for k, r in enumerate(rows[1:], start=2):
            if len(r) < len(header):
                raise MissingCell(f"short row at line {k}")
            key = (r[iu].strip(), r[it].strip())
            if key in cells:
                raise DuplicateCell(f"duplicate cell unit={key[0]} time={key[1]}")
            cells[key] = _to_float(r[iv].strip(), f"line {k}")
    elif layout == "wide":
        if header[0] != "time":
            raise MissingCell("wide layout needs 'time' as the first column")
        units = header[1:]
        if len(set(units)) != len(units):
            raise DuplicateCell("duplicate unit columns")
        for k, r in enumerate(rows[1:], start=2):
            t = r[0].strip()
            for j, u in enumerate(units, start=1):
                if j >= len(r) or r[j].strip() == "":
                    raise MissingCell(f"missing cell unit={u} time={t}")
                key = (u, t)
                if key in cells:
                    raise DuplicateCell(f"duplicate cell unit={u} time={t}")
                cells[key] = _to_float(r[j].strip(), f"line {k}")
    else:
        raise ValueError(f"unknown layout {layout!r}")
    units = _sort_labels({u for u, _ in cells})
    times = _sort_labels({t for _, t in cells})
    values = np.empty((len(times), len(units)))
    for a, t in enumerate(times):
        for b, u in enumerate(units):
            try:
                values[a, b] = cells[(u, t)]
            except KeyError:
                raise MissingCell(f"missing cell unit={u} time={t}") from None
    return Panel(values, tuple(units), tuple(times))


def load_series_csv(source, columns: Sequence[str] | None = None) -> dict:
    """Read named numeric columns (plus an optional time column) from CSV.

    Rows are ordered by the first column when it is named ``t`` or ``time``.
    """
    rows = list(csv.DictReader(io.StringIO(_read_text(source))))
    if not rows:
        raise MissingCell("empty CSV")
    names = list(rows[0].keys())
    tcol = names[0] if names[0] in ("t", "time") else None
    if tcol is not None:
        order = _sort_labels([r[tcol].strip() for r in rows])
        if len(set(order)) != len(order):
            raise DuplicateCell("duplicate time labels")
        pos = {r[tcol].strip(): r for r in rows}
        rows = [pos[t] for t in order]
    wanted = columns or [n for n in names if n != tcol]
    out = {}
    for c in wanted:
        if c not in names:
            raise MissingCell(f"column {c!r} not found")
        out[c] = np.array([_to_float(r[c].strip() if r[c] else "", f"column {c}") for r in rows])
    if tcol is not None:
        out["_time"] = [r[tcol].strip() for r in rows]
    return out


def load_shares_csv(source, layout: str = "wide") -> ShareSeries:
    """Read shares as ``unit,share`` (static) or in a panel layout.

    A file holding a single period is returned as static shares.
    """
    text = _read_text(source)
    header = [h.strip() for h in next(csv.reader(io.StringIO(text)))]
    if header[:2] == ["unit", "share"]:
        rows = list(csv.DictReader(io.StringIO(text)))
        units = _sort_labels([r["unit"].strip() for r in rows])
        by = {r["unit"].strip(): _to_float(r["share"].strip(), "share") for r in rows}
        return ShareSeries(np.array([by[u] for u in units]))
    rows = [r for r in csv.reader(io.StringIO(text)) if any(c.strip() for c in r)]
    if layout == "wide" and len(rows) == 2:
        units = header[1:]
        by = {u: _to_float(v.strip(), f"unit {u}") for u, v in zip(units, rows[1][1:])}
        if len(by) != len(units):
            raise MissingCell("share row shorter than header")
        return ShareSeries(np.array([by[u] for u in _sort_labels(units)]))
    return ShareSeries(load_panel_csv(text.encode(), layout).values)


def write_panel_csv(path, panel: Panel) -> None:
    """Write a panel in wide layout."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["time", *panel.unit_ids])
        for t, row in zip(panel.time_ids, panel.values):
            w.writerow([t, *(repr(float(x)) for x in row)])
