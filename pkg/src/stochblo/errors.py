"""Exception hierarchy shared by every module."""


class BloError(Exception):
    """Base class for toolkit errors."""


class DimensionError(BloError, ValueError):
    """Argument shape does not match a declared arity."""


class SpaceMismatchError(BloError, ValueError):
    """Vectors from different spaces were combined."""


class NonFiniteError(BloError, ArithmeticError):
    """A NaN or Inf appeared where a finite number was required."""


class DivergenceError(BloError, ArithmeticError):
    """An iterative procedure blew up."""


class InfeasibleError(BloError, MemoryError):
    """A dense object would exceed the configured size guard."""


class ConfigError(BloError, ValueError):
    """Invalid configuration or unknown name."""
