"""Exception types shared across the package.

The CLI maps these onto its exit-code scheme: ConfigError -> 2,
DataError -> 3, NumericsError -> 4.
"""


class ShapeError(ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class GeometryError(ValueError):
    """Unsupported image or network geometry."""


class DataError(RuntimeError):
    """Dataset loading or layout problem."""


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


class NumericsError(ArithmeticError):
    """Non-finite values appeared where finite math was required."""
