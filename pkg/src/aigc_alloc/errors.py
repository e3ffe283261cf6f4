class AllocError(Exception):
    """Base class for every error raised by this package."""


class DomainError(AllocError, ValueError):
    """A scalar argument lies outside the domain of a model function."""


class ContractError(AllocError, ValueError):
    """Shapes or dimensions of the arguments do not agree."""


class ConfigError(AllocError, ValueError):
    """A configuration value or range is invalid."""


class InfeasibleError(AllocError, ValueError):
    """No decision can satisfy a resource budget."""

    def __init__(self, budget, message):
        super().__init__(message)
        self.budget = budget


class CapacityError(AllocError, ValueError):
    """An exhaustive search space exceeds its configured bound."""
