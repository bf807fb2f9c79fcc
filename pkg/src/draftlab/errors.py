"""Exception hierarchy.

Every error carries a short class name that the command-line front end prints
as a machine-parseable prefix, so keep class names stable.
"""


class DraftError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DimensionError(DraftError, ValueError):
    exit_code = 10


class RankError(DraftError, ValueError):
    exit_code = 10


class SequenceTooShortError(DraftError, ValueError):
    exit_code = 11


class InvalidMaskError(DraftError, ValueError):
    exit_code = 12


class ConfigurationError(DraftError, ValueError):
    exit_code = 2


class PreconditionError(DraftError, ValueError):
    exit_code = 13


class StateError(DraftError, RuntimeError):
    exit_code = 14


class UnsupportedFormatError(DraftError, ValueError):
    exit_code = 20


class CorruptFileError(DraftError, ValueError):
    exit_code = 21


class TokenizationError(DraftError, ValueError):
    exit_code = 22


class EmptyTargetError(DraftError, ValueError):
    exit_code = 23


class InfeasibleAlignmentError(DraftError, ValueError):
    exit_code = 24


class UndefinedWERError(DraftError, ValueError):
    exit_code = 25


class CheckpointFormatError(DraftError, ValueError):
    exit_code = 30


class CorruptCheckpointError(CheckpointFormatError):
    exit_code = 31


class CheckpointContentError(DraftError, ValueError):
    exit_code = 32


class MissingGroupError(CheckpointContentError):
    exit_code = 33


class NaNLossError(DraftError, FloatingPointError):
    exit_code = 40


class ResolvablePathError(ConfigurationError):
    exit_code = 3


class UsageError(DraftError, ValueError):
    exit_code = 64


class ReportConflictError(DraftError, ValueError):
    exit_code = 65
