"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes or extents."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ParameterError(ValueError):
    """A configuration value is outside its valid range."""


class TrainingError(RuntimeError):
    """Training diverged; carries the offending epoch index."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class OptimizationError(RuntimeError):
    """Mask optimization diverged; carries the offending iteration."""

    def __init__(self, message, iteration):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration
