"""Exception hierarchy for the periodic evaluation engine.

Every error carries the process exit code the CLI reports for it:

- 1: a verification check failed
- 2: the experiment configuration is invalid
- 3: a numerical failure (domain, bracketing, convergence, overflow)
"""


class PortfolioError(Exception):
    """Base class for all engine errors."""

    exit_code: int = 3


class ConfigError(PortfolioError, ValueError):
    """The experiment configuration is malformed or inconsistent."""

    exit_code = 2


class ModelDomainError(PortfolioError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularVolatilityError(PortfolioError, ArithmeticError):
    """The volatility matrix could not be inverted."""


class WealthOverflowError(PortfolioError, OverflowError):
    """A simulated log-wealth left the configured cap."""


class BracketError(PortfolioError, RuntimeError):
    """A root bracket could not be established."""


class ConvergenceError(PortfolioError, RuntimeError):
    """An iterative solver hit its iteration cap."""


class AssumptionViolationError(PortfolioError, ValueError):
    """The standing parameter assumption does not hold."""


class InconsistentBindingSetError(PortfolioError, RuntimeError):
    """No binding set yields a self-consistent closed-form portfolio."""


class VerificationFailure(PortfolioError):
    """One or more verification checks failed."""

    exit_code = 1
