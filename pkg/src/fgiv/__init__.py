"""Granular instrumental variables for aggregate elasticities in panels with factors."""

from .covariance import PrecisionEstimate, fgl_precision, graphical_lasso, poet_covariance, precision_weights
from .errors import FgivError
from .estimators import (
    CovConfig,
    ElasticityFit,
    construct_giv,
    fgiv_demand,
    fgiv_supply_alg1,
    fgiv_supply_alg2,
    gk_baselines,
    gmm_demand,
    gmm_supply_alg3,
    gmm_supply_alg3prime,
    hac_variance,
)
from .factors import annihilator_matrix, pca_factors, select_num_factors
from .granularity import deterministic_shares, estimate_tail_index, herfindahl
from .panel import AggregateSeries, Panel, ShareSeries, load_panel_csv
from .simulation import DgpConfig, McReport, run_monte_carlo, simulate_design

__version__ = "0.1.0"

__all__ = [
    "AggregateSeries", "CovConfig", "DgpConfig", "ElasticityFit", "FgivError", "McReport", "Panel",
    "PrecisionEstimate", "ShareSeries", "annihilator_matrix", "construct_giv", "deterministic_shares",
    "estimate_tail_index", "fgiv_demand", "fgiv_supply_alg1", "fgiv_supply_alg2", "fgl_precision",
    "gk_baselines", "gmm_demand", "gmm_supply_alg3", "gmm_supply_alg3prime", "graphical_lasso",
    "hac_variance", "herfindahl", "load_panel_csv", "pca_factors", "poet_covariance",
    "precision_weights", "run_monte_carlo", "select_num_factors", "simulate_design",
]
