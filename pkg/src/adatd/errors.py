"""Exception types raised across the toolkit."""


class AdaTdError(Exception):
    """Base class for all toolkit errors."""


class AssumptionError(AdaTdError, ValueError):
    """A modelling assumption (bounded reward, ergodicity, feature rank) fails."""


class NumericError(AdaTdError, ArithmeticError):
    """A numerical routine failed to produce a trustworthy answer."""


class ConditioningError(NumericError):
    """A linear system is too ill-conditioned to solve reliably."""


class CertificateError(AdaTdError, AssertionError):
    """A numerical certificate for a theoretical inequality was violated.

    ``witness`` carries whatever input exposed the violation (usually a
    parameter vector).
    """

    def __init__(self, message, witness=None):
        super().__init__(message)
        self.witness = witness


class ConfigError(AdaTdError, ValueError):
    """An experiment configuration is malformed."""
