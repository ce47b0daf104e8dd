"""Exception hierarchy shared by every module."""


class ZeroSError(Exception):
    """Base class for all library errors."""


class DimensionError(ZeroSError, ValueError):
    """Shapes or axes do not agree with an operation's contract."""


class NumericDomainError(ZeroSError, ValueError):
    """An elementwise function was applied outside its domain."""


class DegenerateRowError(ZeroSError, ValueError):
    """A softmax row has no unmasked entry."""


class ContractError(ZeroSError, ValueError):
    """A precondition on arguments was violated."""


class NumericError(ZeroSError, ArithmeticError):
    """A computation produced NaN or Inf."""

    def __init__(self, message: str, *, position: int | None = None, layer: int | None = None):
        super().__init__(message)
        self.position = position
        self.layer = layer


class TrainingDivergedError(NumericError):
    """Loss or parameters became non-finite during training."""


class ConfigError(ZeroSError, ValueError):
    """A configuration file or object is invalid or infeasible."""


class InputError(ZeroSError, ValueError):
    """Model input (token ids, sequence length) is out of range."""


class CheckpointError(ZeroSError, ValueError):
    """A checkpoint file is malformed or does not match the model config."""
