"""Exception hierarchy shared across the toolkit."""


class TeqError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(TeqError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(TeqError):
    """Numeric-domain violation (division by zero, non-finite input)."""


class ContractError(TeqError):
    """Caller violated a documented precondition."""


class FormatError(TeqError):
    """Malformed or incompatible checkpoint/report file."""


class DataError(TeqError):
    """Calibration or evaluation data insufficient for the request."""


class DivergenceError(TeqError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at training step {step}")
