"""Exception types shared across the package."""


class BlindspotError(Exception):
    """Base class for all errors raised by this package."""


class NumericalFailure(BlindspotError):
    """An iterative routine did not converge, or a factorisation broke down."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateSpectrum(BlindspotError):
    """The matrix has no singular value above the rank tolerance."""


class EmptyInput(BlindspotError, ValueError):
    pass


class ShapeError(BlindspotError, ValueError):
    pass


class NoNullSpace(BlindspotError):
    """The head's transpose has a trivial null space, so no blind-spot direction exists."""


class ConfigError(BlindspotError, ValueError):
    pass


class TrainingDiverged(BlindspotError):
    def __init__(self, epoch, message=None):
        super().__init__(message or f"training diverged at epoch {epoch}")
        self.epoch = epoch


class MatrixParseError(BlindspotError, ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line
