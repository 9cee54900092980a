"""Exception types shared across the package."""


class UscaError(Exception):
    """Base class for all package errors."""


class InputError(UscaError, ValueError):
    """Malformed arguments: dimension mismatch, out-of-range parameters."""


class NumericalError(UscaError, ArithmeticError):
    """A factorization or evaluation produced something unusable."""


class ResourceError(UscaError, MemoryError):
    """A requested size exceeds a configured cap."""


class UnsupportedOperation(UscaError, TypeError):
    """The operation has no meaning for this kernel family."""
