"""Exception hierarchy shared by every fetsim module."""


class FetsimError(Exception):
    """Base class for all errors raised by fetsim."""


class ContractError(FetsimError, ValueError):
    """A documented precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class NumericError(FetsimError, ArithmeticError):
    """A numerical routine failed to converge or produced non-finite output."""


class BudgetExhausted(FetsimError):
    """Training would exceed the configured privacy budget."""

    def __init__(self, epsilon, cap, steps):
        super().__init__(
            f"privacy budget exhausted: epsilon {epsilon:.4f} > cap {cap:.4f} "
            f"after {steps} steps"
        )
        self.epsilon = epsilon
        self.cap = cap
        self.steps = steps


class ConfigError(ContractError):
    """A configuration file or input table failed validation."""

    def __init__(self, message, keys=()):
        super().__init__(message)
        self.keys = list(keys)
