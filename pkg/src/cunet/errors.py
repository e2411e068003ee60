"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage problems exit 1,
data and file-format problems exit 2, numeric failures exit 3.
"""


class CunetError(Exception):
    """Base class for every error raised deliberately by this package."""


class ConfigError(CunetError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(CunetError, ValueError):
    """Tensor dimensions are inconsistent for the requested operation."""


class ContractError(CunetError, ValueError):
    """A caller violated an operation's precondition."""


class FormatError(CunetError, ValueError):
    """A file on disk does not match the expected binary or text layout."""


class NumericFault(CunetError, ArithmeticError):
    """NaN or Inf was produced or consumed."""


class SolverFailure(CunetError, RuntimeError):
    """An adaptive ODE solve could not reach the end of its interval."""

    def __init__(self, message: str, t_reached: float):
        super().__init__(f"{message} (reached t={t_reached:.6g})")
        self.t_reached = t_reached
