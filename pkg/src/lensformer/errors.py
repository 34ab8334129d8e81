"""Exception types shared across the package."""


class LensformerError(Exception):
    """Base class for all package errors."""


class DimensionError(LensformerError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(LensformerError, ValueError):
    """An argument violates an operation's preconditions."""


class ConfigError(LensformerError, ValueError):
    """A configuration object or file is invalid."""


class TrainingDiverged(LensformerError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
