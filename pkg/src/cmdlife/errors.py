"""Exception hierarchy shared by every stage of the pipeline.

``ValidationError`` subclasses map to CLI exit code 1; I/O problems surface as
``OSError`` and map to exit code 2.
"""


class CmdlifeError(Exception):
    """Base class for all package errors."""


class ValidationError(CmdlifeError, ValueError):
    """Input violates a documented contract."""


# trajectory_signal
class SignalTooShort(ValidationError):
    pass


class IrregularSampling(ValidationError):
    pass


# phrase_parser
class ParseError(ValidationError):
    """Utterance could not be turned into a command."""


class NoCallsign(ParseError):
    pass


class NotACommand(ParseError):
    pass


class MissingValue(ParseError):
    pass


class WrongSpeaker(ParseError):
    pass


# context_features
class BadCoordinate(ValidationError):
    pass


class UndefinedBearing(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


# scene_raster
class EmptyWindow(ValidationError):
    pass


class TargetMissing(ValidationError):
    pass


# aligner
class SampleDropped(ValidationError):
    pass


# neural
class SchemaMismatch(ValidationError):
    pass


class NonFinite(ValidationError):
    pass


class NoData(ValidationError):
    pass


# ensemble_eval
class IncompleteEnsemble(ValidationError):
    pass


class R2Undefined(ValidationError):
    pass


class BadSlot(ValidationError):
    pass


# workload
class BadDuration(ValidationError):
    pass


class BadWindow(ValidationError):
    pass


# synthgen / cli
class BadConfig(ValidationError):
    pass
