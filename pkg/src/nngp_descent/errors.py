"""Exception taxonomy shared by all modules.

The CLI maps these onto process exit codes: configuration problems exit
with 2, numerical failures with 3, and violated integrability hypotheses
with 4.
"""


class NngpDescentError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(NngpDescentError, ValueError):
    """A caller passed an argument outside an operation's precondition."""


class ConfigError(NngpDescentError):
    """An experiment configuration failed to parse or validate."""


class UnsupportedConfigurationError(ConfigError):
    """A requested mode is outside its supported domain (e.g. closed-form
    constants for a nonlinear activation)."""


class NumericalError(NngpDescentError):
    """A numerical routine produced non-finite or inconsistent output."""

    def __init__(self, message, grid_point=None):
        super().__init__(message)
        self.grid_point = grid_point


class SingularEvaluationError(NumericalError):
    """A transform was evaluated on the support of its measure."""


class ConvergenceError(NumericalError):
    """A fixed-point iteration did not reach tolerance.

    Carries the worst grid point, its residual and the iteration count so
    the failure can be reproduced directly.
    """

    def __init__(self, message, grid_point=None, residual=None, iterations=None):
        super().__init__(message, grid_point=grid_point)
        self.residual = residual
        self.iterations = iterations


class DegenerateKernelError(NumericalError):
    """A kernel matrix lost positive definiteness beyond repair (names the
    offending row when known)."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class HypothesisViolationError(NngpDescentError):
    """The integrability hypotheses behind the asymptotic formulas fail for
    the requested configuration."""


EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_HYPOTHESIS = 4
