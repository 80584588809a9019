"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/format problems with 3, numerical failures with 4.
"""


class PlaynextError(Exception):
    """Base class for all package errors."""


class ConfigError(PlaynextError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DataFormatError(PlaynextError):
    """Malformed input file (CLI exit code 3). Carries a line number when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


class ValidationError(PlaynextError):
    """Input violates a documented invariant (CLI exit code 3)."""


class ShapeError(ValidationError):
    """Array dimensions do not match the expected shape."""


class MissingFeatureError(ValidationError):
    """A song has no usable feature under the requested feature kind."""


class NumericalError(PlaynextError):
    """A numerical routine failed to produce a finite result (CLI exit code 4)."""
