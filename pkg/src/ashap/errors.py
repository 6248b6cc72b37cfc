"""Exception hierarchy shared across the package."""


class AshapError(Exception):
    """Base class for all errors raised by ashap."""


class DataError(AshapError):
    """Malformed input data or a violated dataset precondition."""


class ParseError(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(DataError):
    """A value does not match the declared feature kind."""


class SizingError(DataError):
    """Not enough rows to build the requested partitions."""


class ConstantFeatureError(DataError):
    def __init__(self, names):
        self.names = list(names)
        super().__init__("constant feature(s) in training data: " + ", ".join(self.names))


class FitError(AshapError):
    """A detector could not be fitted."""


class CapabilityError(AshapError):
    """The detector does not provide what an interpreter needs."""


class OptimizationError(AshapError):
    """The local minimization behind an anchor point failed."""


class EstimationError(AshapError):
    """The Shapley regression could not be solved."""


class MetricError(AshapError):
    """A metric is undefined for the given inputs."""


class ModelFormatError(AshapError):
    """A serialized model file is invalid or inconsistent."""
