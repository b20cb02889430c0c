"""Desk-scale simulator for multi-party fuzzy vertical federated learning."""

__version__ = "0.1.0"

from .errors import (BudgetExhausted, ConfigError, ContractError, DimensionError, FetsimError,
                     NumericError)

__all__ = ["BudgetExhausted", "ConfigError", "ContractError", "DimensionError", "FetsimError",
           "NumericError", "__version__"]
