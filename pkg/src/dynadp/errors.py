"""Exception types shared across the package.

Each class carries an ``exit_code`` so the CLI can map failures to a
process status by category.
"""


class DynaDPError(Exception):
    exit_code = 1


class InvalidParameterError(DynaDPError, ValueError):
    """A caller supplied an argument outside its documented domain."""
    exit_code = 2


class ShapeMismatchError(InvalidParameterError):
    exit_code = 2


class ConfigError(DynaDPError, ValueError):
    """Experiment/CLI configuration failed validation.

    ``path`` names the offending field, e.g. ``"privacy.delta"``.
    """
    exit_code = 3

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ParseError(DynaDPError, ValueError):
    """Base for malformed input files."""
    exit_code = 4


class BadMagicError(ParseError):
    pass


class TruncatedPayloadError(ParseError):
    pass


class CountMismatchError(ParseError):
    pass


class NotRecoverableError(DynaDPError):
    """The analytic input-recovery oracle does not apply to these gradients."""
    exit_code = 5


class TrainingDivergedError(DynaDPError, FloatingPointError):
    exit_code = 6


class MissingDumpEntryError(DynaDPError, KeyError):
    exit_code = 7

    def __str__(self):
        return Exception.__str__(self)
