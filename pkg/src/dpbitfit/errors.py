"""Exception hierarchy shared across the package."""


class DPBFError(Exception):
    """Base class for all package errors."""


class DimensionError(DPBFError, ValueError):
    pass


class ConfigurationError(DPBFError, ValueError):
    pass


class ParameterError(DPBFError, ValueError):
    pass


class InputError(DPBFError, ValueError):
    pass


class PolicyError(DPBFError, RuntimeError):
    """An operation was requested that the current training mode forbids."""


class InternalError(DPBFError, RuntimeError):
    pass


class CalibrationError(DPBFError, RuntimeError):
    pass


class UnledgeredAllocation(DPBFError, RuntimeError):
    pass


class TrainingDiverged(DPBFError, ArithmeticError):
    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
