"""Exception types shared across the package."""


class VamlabError(Exception):
    """Base class for all package errors."""


class ConfigurationError(VamlabError, ValueError):
    """Invalid parameters, shapes, or configuration values."""


class NumericError(VamlabError, ArithmeticError):
    """A computation produced a non-finite or out-of-domain value."""


class ContractViolation(VamlabError):
    """A caller broke an operation's precondition (e.g. non-scalar loss)."""


class DivergenceError(VamlabError):
    """A training run's value estimate blew past the divergence threshold."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration
