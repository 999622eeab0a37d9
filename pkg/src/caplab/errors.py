"""Exception taxonomy shared across the package.

Kept deliberately small: callers distinguish bad shapes, bad values,
bad files, and bad configurations; everything else is a plain bug.
"""


class ShapeError(ValueError):
    """Operands have incompatible dimensions."""


class DomainError(ValueError):
    """Value outside the operation's domain (empty axis, unknown id, bad tag)."""


class GraphError(RuntimeError):
    """Autodiff contract violation, e.g. backward from a non-scalar."""


class NumericError(ArithmeticError):
    """Non-finite value detected where finite numbers are required."""


class FormatError(ValueError):
    """Malformed or truncated on-disk artifact."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""
