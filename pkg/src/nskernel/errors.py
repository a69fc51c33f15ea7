"""Exception hierarchy shared by all modules."""


class NSKernelError(Exception):
    """Base class for package errors."""


class ConfigurationError(NSKernelError, ValueError):
    """Invalid model, grid or training configuration."""


class ShapeError(NSKernelError, ValueError):
    """Array shapes do not match what an operation expects."""


class DomainError(NSKernelError, ValueError):
    """Input outside the domain of a function (e.g. t < t_prev)."""


class InfeasibleError(NSKernelError, ArithmeticError):
    """Intensity (or barrier argument) is non-positive where a log is taken."""

    def __init__(self, message, index=None, value=None):
        super().__init__(message)
        self.index = index
        self.value = value


class DominationError(NSKernelError, RuntimeError):
    """Thinning upper bound was exceeded by the intensity."""

    def __init__(self, message, sup_seen=None):
        super().__init__(message)
        self.sup_seen = sup_seen


class NumericalError(NSKernelError, ArithmeticError):
    """Non-finite loss or gradient."""
