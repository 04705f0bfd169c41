"""Exception types shared across the package."""


class GfError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GfError, ValueError):
    """Invalid shapes, sizes or configuration values."""


class UsageError(GfError, RuntimeError):
    """An API was called outside its contract (wrong step, missing prerequisite)."""


class DatasetError(GfError):
    """Base class for dataset loading failures."""


class BadMagicError(DatasetError):
    pass


class TruncatedPayloadError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


class CheckpointError(GfError):
    """Base class for checkpoint loading failures."""


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointHashError(CheckpointError):
    pass


class InfeasibleBudgetError(GfError, ValueError):
    """Requested budget lies outside the range reachable by any exit distribution."""

    def __init__(self, budget: float, low: float, high: float):
        self.budget, self.low, self.high = budget, low, high
        super().__init__(
            f"budget {budget:.6g} is infeasible; feasible per-sample range is [{low:.6g}, {high:.6g}]"
        )
