"""Exception types shared across the package.

The CLI maps these to exit codes: DataError -> 2, NumericError -> 3.
"""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range or inconsistent."""


class ModeError(ValueError):
    """An operation was called on parameters of the wrong kind."""


class NumericError(FloatingPointError):
    """A tensor or loss acquired a non-finite value."""


class DataError(ValueError):
    """Input data is missing or inconsistent."""


class ParseError(DataError):
    """A file line could not be parsed."""

    def __init__(self, path, lineno, msg):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


class InputFormatError(ValueError):
    """A token sequence is missing a required special token."""
