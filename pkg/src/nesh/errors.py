"""Exception types raised across the package."""


class NeshError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NeshError, ValueError):
    pass


class InvalidInputError(NeshError, ValueError):
    pass


class EmptyShellError(InvalidInputError):
    pass


class TrainingDivergedError(NeshError, FloatingPointError):
    def __init__(self, message, epoch=None, batch=None):
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class CheckpointCorruptError(NeshError):
    pass


class RankDeficientError(NeshError, ArithmeticError):
    pass


class TensorFitFailedError(NeshError, ArithmeticError):
    pass


class ParseError(NeshError, ValueError):
    pass


class InvalidSpecError(NeshError, ValueError):
    pass
