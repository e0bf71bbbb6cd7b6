"""Deep dynamic factor model for nowcasting mixed-frequency macro panels.

A nonlinear encoder compresses a monthly panel into a few factors, a
linear decoder maps them back, and quarterly series are tied to the
monthly grid by a fixed triangular aggregation. Factor and idiosyncratic
dynamics are then cast in a linear state space for filtering, smoothing
and forecasting in pseudo-real time.
"""

from .data import (DGPConfig, Panel, SeriesMeta, Standardizer, Vintage, fill_panel,
                   generate_synthetic_panel, load_panel, make_vintage, standardize,
                   transform_panel)
from .dynamics import ARModel, VARModel, fit_ar, fit_var
from .evaluation import (BacktestConfig, CVGrid, ForecastRecord, Nowcaster,
                         ar1_benchmark, composite_indicator, cross_validate,
                         expanding_backtest, rmsfe_report)
from .network import MM_WEIGHTS, AdamConfig, EncoderSpec, NetworkState, init_network
from .statespace import (StateSpace, assemble_state_space, build_state_space,
                         kalman_filter, kalman_smooth, project_forecasts)
from .training import FitResult, TrainConfig, train_d2fm

__version__ = "0.1.0"

__all__ = [
    "ARModel", "AdamConfig", "BacktestConfig", "CVGrid", "DGPConfig", "EncoderSpec",
    "FitResult", "ForecastRecord", "MM_WEIGHTS", "NetworkState", "Nowcaster", "Panel",
    "SeriesMeta", "StateSpace", "Standardizer", "TrainConfig", "VARModel", "Vintage",
    "ar1_benchmark", "assemble_state_space", "build_state_space", "composite_indicator",
    "cross_validate", "expanding_backtest", "fill_panel", "fit_ar", "fit_var",
    "generate_synthetic_panel", "init_network", "kalman_filter", "kalman_smooth",
    "load_panel", "make_vintage", "project_forecasts", "rmsfe_report", "standardize",
    "train_d2fm", "transform_panel",
]
