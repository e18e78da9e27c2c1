"""Exception types raised across the package."""


class CrossPolError(Exception):
    """Base class for all package errors."""


class InvalidArgument(CrossPolError, ValueError):
    pass


class ContractViolation(CrossPolError, ValueError):
    """An input does not satisfy an operation precondition."""


class TotalWeightCollapse(CrossPolError, ArithmeticError):
    """Every log-weight is -inf, so the weighted measure is empty."""


class PartitionCollapse(TotalWeightCollapse):
    """A single partition lost all of its weight during norming-apart pooling."""

    def __init__(self, partition: int, message: str | None = None):
        self.partition = partition
        super().__init__(message or f"partition {partition} has zero total weight")


class PropagationError(CrossPolError, ArithmeticError):
    """Kepler's equation failed to converge."""


class ConfigError(CrossPolError, ValueError):
    pass
