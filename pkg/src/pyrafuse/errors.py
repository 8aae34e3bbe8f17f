"""Exception types shared across the package.

The CLI maps these onto exit codes: UsageError/ConfigError -> 1,
NumericError -> 2, anything I/O-ish -> 3.
"""


class PyrafuseError(Exception):
    """Base class for package errors."""


class ShapeError(PyrafuseError, ValueError):
    """Operands have incompatible or malformed shapes."""


class InvalidValueError(PyrafuseError, ValueError):
    """An operand contains values outside the op's domain (inf/nan, etc.)."""


class UsageError(PyrafuseError, ValueError):
    """The caller violated an API precondition."""


class ConfigError(PyrafuseError, ValueError):
    """A config file or config object is malformed."""


class NumericError(PyrafuseError, RuntimeError):
    """A numeric invariant failed at runtime (divergence, failed check)."""


class GenerationError(PyrafuseError, RuntimeError):
    """Scene generation could not satisfy a placement constraint."""
