"""Shared exception types."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class EmptyReductionError(ValueError):
    """A reduction was asked to aggregate zero elements."""


class ContractError(ValueError):
    """An operation was called outside its documented contract."""


class ConfigurationError(ValueError):
    """A config object or config/parameter combination is invalid."""


class ManifestError(ValueError):
    """A manifest file could not be parsed or validated.

    Carries the 1-based line number when the failure is tied to a line.
    """

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SampleValidationError(ValueError):
    """A sample record violates a structural invariant."""


class SequenceError(ValueError):
    """An interleaved sequence could not be assembled or is too long."""


class MissingImageError(LookupError):
    """An image placeholder refers to an image that was not provided."""
