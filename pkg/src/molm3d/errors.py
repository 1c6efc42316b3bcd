"""Exception hierarchy.

Errors split into two families so the command line can map them to exit
codes: :class:`DataError` for bad inputs (exit 3) and :class:`StateError`
for missing or inconsistent run state (exit 4).
"""


class MolmError(Exception):
    pass


class DataError(MolmError, ValueError):
    pass


class StateError(MolmError, RuntimeError):
    pass


# molecules
class SmilesError(DataError):
    pass


class UnsupportedElement(DataError):
    pass


class UnbalancedBranch(SmilesError):
    pass


class UnclosedRing(SmilesError):
    pass


class EmptyInput(DataError):
    pass


class MultiFragment(SmilesError):
    pass


class PlacementFailure(DataError):
    pass


class CountMismatch(DataError):
    pass


class MalformedLine(DataError):
    pass


class CoordsUnset(DataError):
    pass


# models
class UnknownElement(DataError):
    pass


class TokenOutOfVocab(DataError):
    pass


class ModeInputMismatch(DataError):
    pass


class SequenceTooLong(DataError):
    pass


class UnknownTargetModule(StateError):
    pass


class NoAdapters(StateError):
    pass


# objectives
class DegenerateBatch(DataError):
    pass


class EmptyResponseMask(DataError):
    pass


# training
class InvalidSchedule(DataError):
    pass


class FrozenViolation(StateError):
    pass


class NoDatasets(DataError):
    pass


class DigestMismatch(StateError):
    pass


class VersionUnsupported(StateError):
    pass


class MissingCheckpoint(StateError):
    pass


# datasets
class MissingProperty(DataError):
    pass


class NoDescription(DataError):
    pass


class BadRatios(DataError):
    pass


class SchemaViolation(DataError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


# evaluation
class NonSquare(DataError):
    pass


class KTooLarge(DataError):
    pass


class EmptyCandidate(DataError):
    pass
