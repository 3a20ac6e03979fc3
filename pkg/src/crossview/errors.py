"""Error types shared across the library."""


class RangeError(ValueError):
    """A scalar argument is outside its documented range."""


class ShapeError(ValueError):
    """Array dimensions do not match the operation's contract."""


class ContractError(ValueError):
    """An input violates a documented precondition other than range/shape."""


class NumericError(ArithmeticError):
    """A computation produced or received a non-finite value."""


class ConfigError(ValueError):
    """An unknown or inconsistent configuration value."""


class FetchError(RuntimeError):
    """A remote tile could not be retrieved."""


class ProtocolError(RuntimeError):
    """A remote server answered with something other than the expected payload."""
