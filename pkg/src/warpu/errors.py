"""Exception types shared across the package."""


class WarpUError(Exception):
    """Base class for all package-specific errors."""


class InputError(WarpUError, ValueError):
    """Invalid argument values (dimension mismatch, empty samples, bad counts)."""


class ConfigError(WarpUError, ValueError):
    """Invalid experiment configuration. Collects every violated field.

    CLI maps this to exit code 2.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class NumericError(WarpUError, ArithmeticError):
    """Numerical failure (singular scale factor, non-finite quantities).

    CLI maps this to exit code 3.
    """


class DegenerateStateError(NumericError):
    """Every back-mapped image of a point falls outside the target support,
    so the inverse-warp index distribution is undefined there."""


class OverlapError(NumericError):
    """Bridge iteration has no usable overlap: all weight terms degenerate."""


class NonConvergenceError(NumericError):
    """Iterative scheme exceeded its iteration budget.

    The last iterate is attached as ``result`` for inspection.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
