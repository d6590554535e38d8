"""Command-line front end.

Every command reads an optional JSON config; command-line flags override its
keys. Exit codes: 0 success, 1 runtime or estimation failure, 2 bad config or
unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, fields

import numpy as np

from .errors import ConfigError, DimensionMismatch, DuplicateCell, FgivError, MissingCell, NonNumericValue
from .estimators import (
    CovConfig,
    bn_fgmm_demand,
    construct_giv,
    fgiv_demand,
    fgiv_supply_alg1,
    gk_baselines,
    gmm_demand,
    gmm_supply_alg3,
    gmm_supply_alg3prime,
    misspecified_supply,
)
from .factors import annihilator_matrix, observed_loading_factor, pca_factors, select_num_factors
from .granularity import (
    TAIL_METHODS,
    asymptotic_herfindahl_limit,
    classify_tail_regime,
    deterministic_shares,
    estimate_tail_index,
    herfindahl,
    size_rank_table,
)
from .panel import _sort_labels, _to_float, load_panel_csv, load_series_csv, load_shares_csv, write_panel_csv
from .simulation import (
    SCHEMA_VERSION,
    TABLE_ESTIMATORS,
    DgpConfig,
    run_monte_carlo,
    simulate_design,
)

DGP_KEYS = {f.name for f in fields(DgpConfig)}
COV_KEYS = {"cov_method", "shrink", "c_const", "rho", "weighted", "cv", "folds"}
COMMAND_KEYS = {
    "simulate": DGP_KEYS | {"out"},
    "estimate": COV_KEYS | {
        "panel", "layout", "aggregates", "shares", "lag_shares", "observed_loadings", "controls",
        "equation", "method", "r", "select_r", "kmax", "pad_r", "variance", "hac_lags", "out", "tol", "max_iter",
    },
    "mc": DGP_KEYS | COV_KEYS | {"m_reps", "estimators", "threads", "nominal_size", "rmax", "out", "table"},
    "tail": {"sizes", "column", "methods", "tail_fraction", "min_tail", "out", "plot", "histogram", "bins"},
    "herfindahl": {"n", "mu", "shares", "out", "paths"},
}
EST_METHODS = {
    "supply": ("fgiv", "gmm", "gmm_fgl", "gk", "misspec"),
    "demand": ("fgiv", "gmm", "gk", "fgmm"),
}


class _Exit(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise _Exit(2, f"cannot read config {path}: {exc}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise _Exit(2, f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise _Exit(2, f"{path}: top level must be a JSON object")
    return cfg


def _merge(command: str, cfg: dict, overrides: dict) -> dict:
    merged = dict(cfg)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(merged) - COMMAND_KEYS[command])
    if unknown:
        raise _Exit(2, f"unknown config keys for {command}: {', '.join(unknown)}")
    return merged


def _dgp(cfg: dict) -> DgpConfig:
    try:
        return DgpConfig(**{k: v for k, v in cfg.items() if k in DGP_KEYS})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _cov(cfg: dict) -> CovConfig:
    kw = {k: cfg[k] for k in COV_KEYS - {"cov_method"} if k in cfg}
    if "cov_method" in cfg:
        kw["method"] = cfg["cov_method"]
    return CovConfig(**kw)


def _require(cfg: dict, key: str, flag: str):
    if cfg.get(key) in (None, ""):
        raise ConfigError(f"{flag} is required")
    return cfg[key]


def _write_json(path, obj) -> None:
    text = json.dumps(obj, indent=2, default=_json_default)
    if path in (None, "-"):
        print(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text + "\n")


def _json_default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


# ------------------------------------------------------------------ commands

def cmd_simulate(cfg: dict) -> dict:
    dgp = _dgp(cfg)
    out = cfg.get("out") or "."
    os.makedirs(out, exist_ok=True)
    mk = simulate_design(dgp)
    write_panel_csv(os.path.join(out, "panel.csv"), mk.panel)
    with open(os.path.join(out, "aggregates.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "d", "p"])
        for t, d, p in zip(mk.panel.time_ids, mk.d.values, mk.p.values):
            w.writerow([t, repr(float(d)), repr(float(p))])
    with open(os.path.join(out, "shares.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "share"])
        for u, s in zip(mk.panel.unit_ids, mk.truth["shares"]):
            w.writerow([u, repr(float(s))])
    tr = mk.truth
    truth = {
        "schema_version": SCHEMA_VERSION,
        "config": asdict(dgp),
        "phi_s": tr["phi_s"], "phi_d": tr["phi_d"],
        "sigma2_u": tr["sigma2_u"], "sigma2_lambda": tr["sigma2_lambda"], "sigma2_eps": tr["sigma2_eps"],
        "loadings": tr["loadings"], "factors": tr["factors"], "epsilon": tr["epsilon"],
        "u_s": tr["u"] @ tr["shares"],
    }
    _write_json(os.path.join(out, "truth.json"), truth)
    return {"out": out, "files": ["panel.csv", "aggregates.csv", "shares.csv", "truth.json"]}


def _partial_out(C, *arrays):
    """Residuals from a time-series regression on C (with an intercept)."""
    X = np.column_stack([np.ones(C.shape[0]), C])
    out = []
    for a in arrays:
        coef, *_ = np.linalg.lstsq(X, a, rcond=None)
        out.append(a - X @ coef)
    return out


def _read_estimation_inputs(cfg: dict):
    panel = load_panel_csv(_require(cfg, "panel", "--panel"), cfg.get("layout", "wide"))
    agg = load_series_csv(_require(cfg, "aggregates", "--aggregates"))
    if "p" not in agg:
        raise MissingCell("aggregates file needs a column p")
    p = agg["p"]
    d = agg.get("d")
    T, N = panel.values.shape
    if p.shape[0] != T:
        raise DimensionMismatch(f"aggregates have {p.shape[0]} rows, panel has {T} periods")
    if cfg.get("lag_shares") and not cfg.get("shares"):
        raise ConfigError("--lag-shares needs time-varying shares passed with --shares")
    shares = load_shares_csv(_require(cfg, "shares", "--shares"))
    if shares.mode == "static" and cfg.get("lag_shares"):
        raise ConfigError("--lag-shares needs a time-varying shares file in --shares")
    w = np.asarray(shares.weights)
    if w.shape[-1] != N:
        raise DimensionMismatch(f"shares cover {w.shape[-1]} units, panel has {N}")
    return panel, p, d, shares


def _prepare_layout(cfg: dict, Y, p, d):
    """Apply observed-loading factor extraction and controls before estimation."""
    T = Y.shape[0]
    extra = {}
    demand_controls = []
    if cfg.get("observed_loadings"):
        o = _read_loadings(cfg["observed_loadings"], cfg.get("layout", "wide"))
        Yd = Y - Y.mean(axis=1, keepdims=True)
        eta, _ = observed_loading_factor(Yd, o)
        o_full = np.broadcast_to(o, Y.shape)
        Y = Y - eta.values[:, None] * o_full
        demand_controls.append(eta.values)
        extra["observed_factor"] = eta.values
    if cfg.get("controls"):
        c = load_series_csv(cfg["controls"])
        C = np.column_stack([v for k, v in c.items() if k != "_time"])
        if C.shape[0] != T:
            raise DimensionMismatch(f"controls have {C.shape[0]} rows, panel has {T} periods")
        parts = _partial_out(C, Y, p, *([] if d is None else [d]))
        Y, p = parts[0], parts[1]
        if d is not None:
            d = parts[2]
        if demand_controls:
            demand_controls = _partial_out(C, *demand_controls)
    if demand_controls and d is not None:
        Cd = np.column_stack(demand_controls)
        d, p_d = _partial_out(Cd, d, p)
        extra["p_demand"] = p_d
    return Y, p, d, extra


def _read_loadings(path, layout: str) -> np.ndarray:
    """Observed loadings as ``unit,loading`` rows (static) or a panel file."""
    with open(path, encoding="utf-8-sig") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows or rows[0][0].strip() != "unit" or len(rows[0]) != 2:
        return load_panel_csv(path, layout).values
    by = {r[0].strip(): _to_float(r[1].strip(), "loading") for r in rows[1:]}
    return np.array([by[u] for u in _sort_labels(list(by))])


def cmd_estimate(cfg: dict) -> dict:
    equation = cfg.get("equation", "supply")
    method = cfg.get("method", "gmm")
    if equation not in EST_METHODS:
        raise ConfigError("--equation must be supply or demand")
    if method not in EST_METHODS[equation]:
        raise ConfigError(f"--method for {equation} must be one of {EST_METHODS[equation]}")
    variance = cfg.get("variance", "hc")
    if variance not in ("hc", "hac"):
        raise ConfigError("--variance must be hc or hac")
    if cfg.get("select_r") and cfg.get("r") is not None:
        raise ConfigError("--r and --select-r are mutually exclusive")
    if cfg.get("select_r") not in (None, "er", "gr"):
        raise ConfigError("--select-r must be er or gr")
    m = cfg.get("hac_lags")
    lag = bool(cfg.get("lag_shares", False))
    panel, p, d, shares = _read_estimation_inputs(cfg)
    if (equation == "demand" or method in ("gmm", "gmm_fgl")) and d is None:
        raise MissingCell("aggregates file needs a column d for this estimator")
    Y, p, d, extra = _prepare_layout(cfg, panel.values, p, d)
    selection = None
    if cfg.get("select_r"):
        kmax = int(cfg.get("kmax", 8))
        cnt = select_num_factors(Y - Y.mean(axis=1, keepdims=True), kmax)
        r = cnt.r_er if cfg["select_r"] == "er" else cnt.r_gr
        selection = {"criterion": cfg["select_r"], "selected": r, "kmax": kmax, "flags": cnt.flags}
    else:
        r = int(cfg.get("r", 2))
    if cfg.get("pad_r"):
        r += 1
    cov = _cov(cfg)
    kw = dict(tol=float(cfg.get("tol", 1e-6)), max_iter=int(cfg.get("max_iter", 100)))
    Yd = Y - Y.mean(axis=1, keepdims=True)
    fac = pca_factors(Yd, r)
    if equation == "supply":
        if method == "fgiv":
            fit = fgiv_supply_alg1(Y, p, shares, r, cov, variance, m=m, lag_shares=lag, factors=fac, **kw)
        elif method == "misspec":
            fit = misspecified_supply(Y, p, shares, r, variance, m=m, lag_shares=lag, factors=fac)
        elif method == "gmm":
            fit = gmm_supply_alg3(Y, p, d, shares, r, cov, variance, m=m, lag_shares=lag, factors=fac, **kw)
        elif method == "gmm_fgl":
            cov = _cov({**cfg, "cov_method": "fgl"})
            fit = gmm_supply_alg3prime(Y, p, d, shares, r, cov, variance, m=m, lag_shares=lag,
                                       factors=fac, **kw)
        else:
            fit = gk_baselines(Y, p, d, shares, fac, r, variance_kind=variance, m=m)["supply"]
    else:
        pd_ = extra.get("p_demand", p)
        if method == "gk":
            fit = gk_baselines(Y, p, d, shares, fac, r, variance_kind=variance, m=m)["demand"]
        elif method == "fgmm":
            fit = bn_fgmm_demand(d, pd_, fac, variance, m)
        else:
            z = construct_giv(Yd, annihilator_matrix(fac.loadings), shares, lag).values
            dd, pp, F = (d[1:], pd_[1:], fac.factors[1:]) if lag else (d, pd_, fac.factors)
            if method == "fgiv":
                fit = fgiv_demand(dd, pp, z, variance, m)
            else:
                fit = gmm_demand(dd, pp, z, F, variance, m)
    res = fit.to_dict()
    res.pop("trace", None)
    js = fit.j_stat
    return {
        "schema_version": SCHEMA_VERSION,
        "equation": equation,
        "method": method,
        "r": r,
        "r_selection": selection,
        "fit": res,
        "summary": {
            "estimate": fit.estimate,
            "t_stat": fit.t_stat,
            "j_p_value": None if js is None else js.p_value,
            "first_stage_f": fit.first_stage.get("f_stat"),
            "first_stage_r2": fit.first_stage.get("r2"),
        },
    }


def _mc_table(report: dict) -> list:
    rows = [["estimator", "bias", "rmse", "t_size", "j_size", "failure_rate"]]
    for name, e in report["estimators"].items():
        rows.append([name, e["bias"], e["rmse"], e["t_size"], e.get("j_size", ""), e["failure_rate"]])
    return rows


def cmd_mc(cfg: dict) -> dict:
    dgp = _dgp(cfg)
    m_reps = int(_require(cfg, "m_reps", "--m-reps"))
    est = cfg.get("estimators") or list(TABLE_ESTIMATORS)
    if isinstance(est, str):
        est = [e.strip() for e in est.split(",") if e.strip()]
    rep = run_monte_carlo(dgp, m_reps, est, float(cfg.get("nominal_size", 0.05)),
                          int(cfg.get("threads", 1)), _cov(cfg), int(cfg.get("rmax", 3)))
    out = rep.to_dict()
    if cfg.get("table"):
        with open(cfg["table"], "w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerows(_mc_table(out))
    return out


def _read_sizes(path, column=None) -> np.ndarray:
    with open(path, encoding="utf-8-sig") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows:
        raise MissingCell("empty sizes file")
    try:
        float(rows[0][-1])
        header, body = None, rows
    except ValueError:
        header, body = [h.strip() for h in rows[0]], rows[1:]
    idx = -1
    if column is not None:
        if header is None or column not in header:
            raise MissingCell(f"column {column!r} not found")
        idx = header.index(column)
    return np.array([_to_float(r[idx].strip(), "size") for r in body])


def cmd_tail(cfg: dict) -> dict:
    sizes = _read_sizes(_require(cfg, "sizes", "--sizes"), cfg.get("column"))
    methods = cfg.get("methods") or list(TAIL_METHODS)
    if isinstance(methods, str):
        methods = [m.strip() for m in methods.split(",") if m.strip()]
    unknown = [m for m in methods if m not in TAIL_METHODS]
    if unknown:
        raise ConfigError(f"unknown tail methods {unknown}")
    est = {}
    for m in methods:
        try:
            est[m] = estimate_tail_index(sizes, m, float(cfg.get("tail_fraction", 0.1)),
                                         min_tail=int(cfg.get("min_tail", 10)))
        except FgivError as exc:
            est[m] = {"error": type(exc).__name__, "message": str(exc)}
    if cfg.get("plot"):
        with open(cfg["plot"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["log_rank", "log_size"])
            w.writerows(size_rank_table(sizes).tolist())
    if cfg.get("histogram"):
        # share distribution on a log scale
        counts, edges = np.histogram(np.log(sizes / sizes.sum()), bins=int(cfg.get("bins", 20)))
        with open(cfg["histogram"], "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["log_share_lo", "log_share_hi", "count"])
            w.writerows([[a, b, int(c)] for a, b, c in zip(edges[:-1], edges[1:], counts)])
    return {"schema_version": SCHEMA_VERSION, "n": int(sizes.size), "estimates": est}


def cmd_herfindahl(cfg: dict) -> dict:
    if cfg.get("shares"):
        w = np.asarray(load_shares_csv(cfg["shares"]).weights)
        path = np.atleast_2d(w)
        hs = np.einsum("tn,tn->t", path, path)
        h = float(hs[-1])
        n, mu = int(w.shape[-1]), cfg.get("mu")
        if cfg.get("paths"):
            # per-period Herfindahl next to the share paths
            with open(cfg["paths"], "w", newline="", encoding="utf-8") as fh:
                wr = csv.writer(fh)
                wr.writerow(["period", "herfindahl", *[f"unit_{i + 1}" for i in range(n)]])
                for t, (ht, row) in enumerate(zip(hs, path), start=1):
                    wr.writerow([t, ht, *row.tolist()])
    else:
        n = int(_require(cfg, "n", "--n"))
        mu = float(_require(cfg, "mu", "--mu"))
        h = herfindahl(deterministic_shares(n, mu).shares)
    out = {"schema_version": SCHEMA_VERSION, "n": n, "mu": mu, "herfindahl": h}
    if mu is not None:
        reg = classify_tail_regime(float(mu))
        out["regime"] = {"case": reg.case, "mu_range": list(reg.mu_range), "rate": reg.herfindahl_rate}
        if 0 < mu < 1:
            out["zeta_limit"] = asymptotic_herfindahl_limit(float(mu))
    return out


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "mc": cmd_mc,
    "tail": cmd_tail,
    "herfindahl": cmd_herfindahl,
}


# ------------------------------------------------------------------- parsing

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fgiv", description="Granular instrumental variable estimation.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config; flags override its keys")
        return p

    def dgp_flags(p):
        p.add_argument("--n", type=int)
        p.add_argument("--t", type=int)
        p.add_argument("--mu", type=float)
        p.add_argument("--design", choices=["d1", "d2"])
        p.add_argument("--r", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--calibration", choices=["population", "mean"])

    def cov_flags(p):
        p.add_argument("--cov-method", choices=["identity", "poet", "fgl"])
        p.add_argument("--c-const", type=float)
        p.add_argument("--rho", type=float)
        p.add_argument("--cv", action="store_const", const=True)

    s = common(sub.add_parser("simulate", help="simulate a market and write CSV inputs"))
    dgp_flags(s)
    s.add_argument("--out", help="output directory")

    e = common(sub.add_parser("estimate", help="estimate an elasticity from CSV inputs"))
    e.add_argument("--panel")
    e.add_argument("--layout", choices=["long", "wide"])
    e.add_argument("--aggregates", help="CSV with columns t, d, p")
    e.add_argument("--shares")
    e.add_argument("--lag-shares", action="store_const", const=True)
    e.add_argument("--observed-loadings")
    e.add_argument("--controls")
    e.add_argument("--equation", choices=["supply", "demand"])
    e.add_argument("--method")
    e.add_argument("--r", type=int)
    e.add_argument("--select-r", choices=["er", "gr"], help="choose r by eigenvalue or growth ratio")
    e.add_argument("--kmax", type=int, help="largest factor count considered by --select-r")
    e.add_argument("--pad-r", action="store_const", const=True, help="add one to the selected r")
    e.add_argument("--variance", choices=["hc", "hac"])
    e.add_argument("--hac-lags", type=int)
    cov_flags(e)
    e.add_argument("--out")

    m = common(sub.add_parser("mc", help="run a Monte Carlo study"))
    dgp_flags(m)
    cov_flags(m)
    m.add_argument("--m-reps", type=int)
    m.add_argument("--estimators", help="comma-separated estimator names")
    m.add_argument("--threads", type=int)
    m.add_argument("--rmax", type=int)
    m.add_argument("--out")
    m.add_argument("--table", help="CSV table of bias, RMSE and sizes")

    t = common(sub.add_parser("tail", help="tail-index estimates of a size sample"))
    t.add_argument("--sizes")
    t.add_argument("--column")
    t.add_argument("--methods")
    t.add_argument("--tail-fraction", type=float)
    t.add_argument("--out")
    t.add_argument("--plot", help="CSV of log rank against log size")
    t.add_argument("--histogram", help="CSV histogram of log shares")
    t.add_argument("--bins", type=int)

    h = common(sub.add_parser("herfindahl", help="Herfindahl index and tail regime"))
    h.add_argument("--n", type=int)
    h.add_argument("--mu", type=float)
    h.add_argument("--shares")
    h.add_argument("--paths", help="CSV of per-period Herfindahl and share paths")
    h.add_argument("--out")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    ns = vars(args)
    command = ns.pop("command")
    path = ns.pop("config")
    try:
        cfg = _merge(command, _load_config(path), ns)
        result = COMMANDS[command](cfg)
        _write_json(cfg.get("out") if command != "simulate" else None, result)
        return 0
    except _Exit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, MissingCell, DuplicateCell, NonNumericValue, DimensionMismatch, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except (FgivError, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
