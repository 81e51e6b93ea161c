"""Exception hierarchy shared by every exprfusion module."""


class ExprFusionError(Exception):
    """Base class for all library errors."""


class DimensionError(ExprFusionError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(ExprFusionError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(ExprFusionError, ValueError):
    """Caller-supplied data violates an operation's precondition."""


class EmptyBatchError(InputError):
    """Every position in a batch was ignored."""


class ContractError(ExprFusionError, RuntimeError):
    """An API was called out of order or on an unsupported value."""


class NumericError(ExprFusionError, ArithmeticError):
    """A NaN or Inf appeared in values or gradients."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class DataError(ExprFusionError, OSError):
    """A dataset file is missing, malformed or inconsistent."""


class CheckpointError(ExprFusionError):
    """A checkpoint failed its checksum, version or config check."""
