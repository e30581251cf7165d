"""Shared exception types."""


class EnboostError(Exception):
    """Base class for all package errors."""


class ShapeError(EnboostError):
    """Input or parameter shape does not match a network spec."""


class TrainingDivergedError(EnboostError):
    """Loss became non-finite during training."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")


class BudgetInfeasibleError(EnboostError):
    """A MAC budget cannot be met without emptying a conv layer."""

    def __init__(self, layer_index, message=None):
        self.layer_index = layer_index
        super().__init__(
            message or f"budget infeasible: conv layer {layer_index} cannot lose more filters"
        )


class ConfigError(EnboostError):
    """Invalid configuration document or CLI arguments."""


class TraceError(EnboostError):
    """Malformed or inconsistent power trace."""


class TableLoadError(EnboostError):
    """Q-table file is corrupt, versioned wrong, or sized for a different ensemble."""
