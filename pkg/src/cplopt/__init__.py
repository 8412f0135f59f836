"""Trainable split-cut generation for parametric mixed-integer programs."""

from .engine import RunConfig, Trajectory, backward, run_baseline, run_forward
from .instgen import ControlSpec, MatchingSpec, gen_control, gen_matching
from .model import (
    AlgoState,
    Cut,
    CutPool,
    ModelError,
    ParametricFamily,
    ProblemInstance,
    QualityReport,
    brute_force_optimum,
    integer_feasible_points,
    load_family,
    quality,
    realize,
    realize_split,
    save_family,
)
from .policy import (
    PolicyParams,
    PolicySizes,
    init_params,
    load_policy,
    save_policy,
)
from .train import DatasetSplit, FitResult, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "AlgoState",
    "ControlSpec",
    "Cut",
    "CutPool",
    "DatasetSplit",
    "FitResult",
    "MatchingSpec",
    "ModelError",
    "ParametricFamily",
    "PolicyParams",
    "PolicySizes",
    "ProblemInstance",
    "QualityReport",
    "RunConfig",
    "TrainConfig",
    "Trajectory",
    "backward",
    "brute_force_optimum",
    "evaluate",
    "fit",
    "gen_control",
    "gen_matching",
    "init_params",
    "integer_feasible_points",
    "load_family",
    "load_policy",
    "quality",
    "realize",
    "realize_split",
    "run_baseline",
    "run_forward",
    "save_family",
    "save_policy",
    "__version__",
]
