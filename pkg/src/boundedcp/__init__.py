"""Change-point detection for bounded count series under the BAR(1) model."""

from __future__ import annotations

from .bar_model import (
    BarParams,
    BoundedSeries,
    SegmentedModel,
    conditional_mean,
    conditional_variance,
    kernel_matrix,
    simulate_bar,
    simulate_mcp_bar,
    transition_matrix,
    transition_prob,
)
from .cusum import (
    TestOutcome,
    critical_value,
    cusum_cls,
    cusum_cml,
    cusum_mql,
    run_test,
    simulate_critical_value,
)
from .errors import BoundedCPError
from .estimation import (
    Method,
    ParamEstimate,
    cls_estimate,
    cml_derivatives,
    cml_estimate,
    cml_loglik,
    mql_estimate,
)
from .evaluation import (
    SCENARIOS,
    ExperimentConfig,
    MetricReport,
    distance_d,
    model_fit_stats,
    segmentation_experiment,
    size_power_experiment,
    zeta,
)
from .segmentation import GaConfig, MdlFit, exhaustive_m_sweep, ga_search, mdl_value, s_ga

__all__ = [
    "BarParams",
    "BoundedSeries",
    "SegmentedModel",
    "conditional_mean",
    "conditional_variance",
    "kernel_matrix",
    "transition_matrix",
    "transition_prob",
    "simulate_bar",
    "simulate_mcp_bar",
    "Method",
    "ParamEstimate",
    "cls_estimate",
    "mql_estimate",
    "cml_estimate",
    "cml_loglik",
    "cml_derivatives",
    "TestOutcome",
    "cusum_cls",
    "cusum_mql",
    "cusum_cml",
    "critical_value",
    "simulate_critical_value",
    "run_test",
    "GaConfig",
    "MdlFit",
    "mdl_value",
    "ga_search",
    "s_ga",
    "exhaustive_m_sweep",
    "SCENARIOS",
    "ExperimentConfig",
    "MetricReport",
    "zeta",
    "distance_d",
    "size_power_experiment",
    "segmentation_experiment",
    "model_fit_stats",
    "BoundedCPError",
]
