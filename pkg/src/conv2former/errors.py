"""Exception hierarchy shared by every module."""


class Conv2FormerError(Exception):
    """Base class for all library errors."""


class DimensionError(Conv2FormerError, ValueError):
    """Operand shapes or extents do not agree."""


class ConfigError(Conv2FormerError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(Conv2FormerError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(Conv2FormerError, ArithmeticError):
    """A computation produced NaN or Inf."""


class FormatError(Conv2FormerError, ValueError):
    """A checkpoint or config file is malformed."""
