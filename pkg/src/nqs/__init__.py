"""Predictive loss modeling for pre-training runs.

The package models training loss as a sum over quadratic modes driven by
noisy gradient steps, giving a closed form in model size, batch size, and
step count. On top of the closed form it provides parameter fitting from
scaling datasets, a two-power-law baseline, a Monte-Carlo simulator, and a
constrained search for compute-optimal configurations.
"""

__version__ = "0.1.0"

from .allocator import (
    ConstraintSet,
    GridSpec,
    InfeasibleSearchError,
    SearchResult,
    SliceRow,
    chin_model,
    constrained_search,
    isoflop_slice,
    nqs_model,
)
from .chinchilla import (
    ChinFitConfig,
    ChinFitReport,
    ChinParams,
    chin_fit,
    chin_loss,
    chin_optimal_nd,
)
from .core import (
    appx_error,
    bias_bound_ratio,
    bias_error,
    expected_weight_norm_sq,
    nqs_gradient,
    nqs_loss,
    nqs_loss_layernorm,
    nqs_loss_scheduled,
    var_error,
)
from .data import DatasetFormatError, ScalingDataset, ScalingRecord, load_dataset
from .fitting import (
    DEFAULT_INIT_RANGES,
    FitConfig,
    FitFailureError,
    FitReport,
    anchor_s_grid,
    bootstrap_ci,
    filter_small_batch,
    fit_nqs,
    huber,
    latin_hypercube,
    nqs_objective,
    select_s,
)
from .numerics import (
    NumericsError,
    geometric_sum_sq,
    hybrid_power_sum,
    zeta_tail,
)
from .params import (
    LayerNormConfig,
    LrSchedule,
    NqsParams,
    RunConfig,
    UnstableDynamicsError,
)
from .report import load_params, load_report, save_report
from .simulator import (
    DatasetDesign,
    SimConfig,
    SimResult,
    generate_synthetic_dataset,
    make_batch_rule,
    recurrence_trajectory,
    simulate_layernorm_run,
    simulate_run,
)

__all__ = [
    "ChinFitConfig",
    "ChinFitReport",
    "ChinParams",
    "ConstraintSet",
    "DEFAULT_INIT_RANGES",
    "DatasetDesign",
    "DatasetFormatError",
    "FitConfig",
    "FitFailureError",
    "FitReport",
    "GridSpec",
    "InfeasibleSearchError",
    "LayerNormConfig",
    "LrSchedule",
    "NqsParams",
    "NumericsError",
    "RunConfig",
    "ScalingDataset",
    "ScalingRecord",
    "SearchResult",
    "SimConfig",
    "SimResult",
    "SliceRow",
    "UnstableDynamicsError",
    "anchor_s_grid",
    "appx_error",
    "bias_bound_ratio",
    "bias_error",
    "bootstrap_ci",
    "chin_fit",
    "chin_loss",
    "chin_model",
    "chin_optimal_nd",
    "constrained_search",
    "expected_weight_norm_sq",
    "filter_small_batch",
    "fit_nqs",
    "generate_synthetic_dataset",
    "geometric_sum_sq",
    "huber",
    "hybrid_power_sum",
    "isoflop_slice",
    "latin_hypercube",
    "load_dataset",
    "load_params",
    "load_report",
    "make_batch_rule",
    "nqs_gradient",
    "nqs_loss",
    "nqs_loss_layernorm",
    "nqs_loss_scheduled",
    "nqs_model",
    "nqs_objective",
    "recurrence_trajectory",
    "save_report",
    "select_s",
    "simulate_layernorm_run",
    "simulate_run",
    "var_error",
    "zeta_tail",
]
