"""Glance-and-focus adaptive inference on a small numpy autograd core."""

from .budget import BudgetSolution, CostModel, ExitDistribution, calibrate_thresholds, expected_cost, solve_q
from .engine import EpisodeTrace, InferenceConfig, Summary, batch_infer, infer
from .model import GfModel, ModelConfig, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "BudgetSolution",
    "CostModel",
    "EpisodeTrace",
    "ExitDistribution",
    "GfModel",
    "InferenceConfig",
    "ModelConfig",
    "Summary",
    "batch_infer",
    "calibrate_thresholds",
    "expected_cost",
    "infer",
    "load_checkpoint",
    "save_checkpoint",
    "solve_q",
]
