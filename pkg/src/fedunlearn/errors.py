"""Exception types shared across the package."""


class FedUnlearnError(Exception):
    """Base class for all package errors."""


class ShapeError(FedUnlearnError, ValueError):
    pass


class DegenerateVectorError(FedUnlearnError, ValueError):
    pass


class DegenerateBatchError(FedUnlearnError, ValueError):
    """A mini-batch lacks the class structure a loss needs."""


class NumericError(FedUnlearnError, ArithmeticError):
    pass


class LabelError(FedUnlearnError, ValueError):
    pass


class LookupFailure(FedUnlearnError, KeyError):
    pass


class PartitionError(FedUnlearnError, ValueError):
    pass


class WeightError(FedUnlearnError, ValueError):
    pass


class EvaluationError(FedUnlearnError, ValueError):
    pass


class ConfigError(FedUnlearnError, ValueError):
    """Invalid configuration. ``key`` names the offending entry when known."""

    def __init__(self, message, key=None):
        if key is not None and repr(key) not in message and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)
        self.key = key
