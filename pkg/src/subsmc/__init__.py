"""Subsampling sequential Monte Carlo for static Bayesian regression models."""

from ._backend import BACKEND
from .errors import (
    ComparisonError,
    ConfigError,
    DegenerateCloudError,
    NumericOverflowError,
    ParticleMapError,
    SubsmcError,
)
from .estimator import (
    ControlVariate,
    LogLikEstimate,
    SubsampleLayout,
    annealed_log_estimate,
    build_control_variate,
    estimate_loglik,
    exact_loglik,
    q_term,
    q_total,
)
from .kernels import KernelConfig
from .model import (
    Dataset,
    ModelSpec,
    PriorBlock,
    PriorSpec,
    Problem,
    SimDesign,
    load_dataset,
    save_dataset,
    simulate_dataset,
)
from .smc import SmcConfig, SmcResult, run

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ComparisonError", "ConfigError", "ControlVariate", "Dataset",
    "DegenerateCloudError", "KernelConfig", "LogLikEstimate", "ModelSpec",
    "NumericOverflowError", "ParticleMapError", "PriorBlock", "PriorSpec", "Problem",
    "SimDesign", "SmcConfig", "SmcResult", "SubsampleLayout", "SubsmcError",
    "annealed_log_estimate", "build_control_variate", "estimate_loglik", "exact_loglik",
    "load_dataset", "q_term", "q_total", "run", "save_dataset", "simulate_dataset",
]
