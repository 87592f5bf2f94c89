"""Exception types raised across the package."""


class FedMCCError(Exception):
    """Base class for all package errors."""


class ZeroNormVector(FedMCCError, ValueError):
    pass


class DimMismatch(FedMCCError, ValueError):
    pass


class BatchTooSmall(FedMCCError, ValueError):
    pass


class AllZeroMatrix(FedMCCError, ValueError):
    pass


class IndexOutOfRange(FedMCCError, IndexError):
    pass


class NondifferentiablePoint(FedMCCError, ValueError):
    pass


class StaleCache(FedMCCError, RuntimeError):
    """Raised when an alpha cache is used after the parameters it was built from changed."""


class EmptyDataset(FedMCCError, ValueError):
    pass


class IndivisibleClasses(FedMCCError, ValueError):
    pass


class ShapeMismatch(FedMCCError, ValueError):
    pass


class LengthMismatch(FedMCCError, ValueError):
    pass


class ParseError(FedMCCError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(FedMCCError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class CheckpointError(FedMCCError, ValueError):
    pass


class StageError(FedMCCError, RuntimeError):
    """Wraps a failure inside an experiment run, naming the stage that failed."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
