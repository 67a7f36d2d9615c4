"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
AssumptionError -> 3, ConvergenceError and NumericError -> 4.
Tolerance failures are reported, not raised.
"""


class MrbsdeError(Exception):
    """Base class for package errors."""


class ConfigError(MrbsdeError):
    """Invalid configuration, schema violation or unusable input."""


class AssumptionError(MrbsdeError):
    """A standing assumption fails: infeasible contraction plan, missing
    bisection bracket, violated intensity bound, and similar."""


class ConvergenceError(MrbsdeError):
    """Picard iteration did not converge within the iteration budget."""

    def __init__(self, message, ratios=None):
        super().__init__(message)
        self.ratios = list(ratios) if ratios is not None else []


class NumericError(MrbsdeError):
    """Non-finite values encountered where finite numbers are required."""
