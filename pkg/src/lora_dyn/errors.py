"""Exception types shared across the package."""


class LoraDynError(Exception):
    """Base class for all errors raised by lora_dyn."""


class ArgumentError(LoraDynError, ValueError):
    """An argument is out of range or has the wrong shape."""


class DegenerateInputError(LoraDynError, ValueError):
    """The input is rank deficient in a way the operation cannot handle."""


class NumericFailure(LoraDynError, ArithmeticError):
    """An underlying numerical routine failed to converge."""


class SingularityError(LoraDynError, ArithmeticError):
    """A plain matrix inverse was requested for a singular matrix."""

    def __init__(self, message, factor=None):
        super().__init__(message)
        self.factor = factor


class ConfigurationError(LoraDynError, ValueError):
    """A configuration is invalid or does not match the requested check."""


class DivergenceError(LoraDynError, RuntimeError):
    """Training aborted because the risk exceeded the divergence threshold."""

    def __init__(self, message, step, trajectory=None):
        super().__init__(message)
        self.step = step
        self.trajectory = trajectory
