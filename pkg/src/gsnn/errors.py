"""Exception types shared across the package."""


class GsnnError(Exception):
    """Base class for all package errors."""


class DimensionError(GsnnError, ValueError):
    """Operand shapes do not conform."""


class NumericError(GsnnError, FloatingPointError):
    """A computation produced NaN or Inf.

    ``stage`` names the intermediate that went non-finite.
    """

    def __init__(self, stage, message=None):
        self.stage = stage
        super().__init__(message or f"non-finite values at stage '{stage}'")


class DomainError(GsnnError, ValueError):
    """An argument lies outside its mathematical domain."""


class ConfigError(GsnnError, ValueError):
    """Invalid configuration value."""


class StateError(GsnnError, RuntimeError):
    """An object is not in the state an operation requires."""


class ParseError(GsnnError, ValueError):
    """Malformed input file. ``line`` is 1-based when known."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class VersionError(ParseError):
    """File header carries an unsupported format version."""
