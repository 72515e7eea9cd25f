"""Exception types shared across the package."""


class CsgFitError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class EvaluationError(CsgFitError, ValueError):
    """Non-finite parameters or inputs reached a field evaluation."""


class FormatError(CsgFitError, ValueError):
    """Malformed file contents; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DivergenceError(CsgFitError):
    """The optimizer produced a non-finite loss."""

    def __init__(self, message, step=None, term=None):
        super().__init__(message)
        self.step = step
        self.term = term
