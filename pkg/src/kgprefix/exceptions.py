"""Exception hierarchy. Each family maps to one CLI exit code."""


class KgPrefixError(Exception):
    exit_code = 1


class ConfigError(KgPrefixError, ValueError):
    exit_code = 2


class CorpusFormatError(KgPrefixError, ValueError):
    """Malformed corpus or generation file; carries the 1-based line number."""

    exit_code = 2

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class DependencyError(KgPrefixError):
    exit_code = 3


class CheckpointError(KgPrefixError):
    exit_code = 4


class NumericError(KgPrefixError, ArithmeticError):
    exit_code = 5


class DimensionError(KgPrefixError, ValueError):
    exit_code = 5


class EmptyLossError(NumericError):
    pass


class LengthError(KgPrefixError, ValueError):
    exit_code = 2


class FrozenParameterError(KgPrefixError, RuntimeError):
    exit_code = 5


class CapacityError(KgPrefixError, ValueError):
    exit_code = 2


class DecodingError(KgPrefixError, RuntimeError):
    exit_code = 5


class AlignmentError(KgPrefixError, ValueError):
    """Generations and corpus turns do not line up."""

    exit_code = 2
