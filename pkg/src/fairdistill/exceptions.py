"""Exception and warning types raised across the pipeline."""


class FairDistillError(Exception):
    """Base class for all errors raised by fairdistill."""


# data
class MissingColumn(FairDistillError):
    pass


class UnknownCategory(FairDistillError):
    def __init__(self, column, row, value):
        super().__init__(f"unknown category {value!r} in column {column!r} at row {row}")
        self.column, self.row, self.value = column, row, value


class NonFiniteNumeric(FairDistillError):
    def __init__(self, column, row):
        super().__init__(f"non-finite or unparsable numeric in column {column!r} at row {row}")
        self.column, self.row = column, row


class EmptyFile(FairDistillError):
    pass


class TooFewRows(FairDistillError):
    pass


class WidthMismatch(FairDistillError):
    pass


class SchemaError(FairDistillError):
    """Schema violates its own invariants (roles, vocabularies, ranges)."""


# nn core
class ShapeMismatch(FairDistillError):
    pass


class NonFiniteActivation(FairDistillError):
    pass


class StaleTape(FairDistillError):
    pass


class NonFiniteGradient(FairDistillError):
    pass


class NonFiniteLoss(FairDistillError):
    pass


# models
class BatchTooSmall(FairDistillError):
    pass


class TeacherNotFrozen(FairDistillError):
    pass


class LatentDimMismatch(FairDistillError):
    pass


class SchemaMismatch(FairDistillError):
    pass


# eval
class TooFewRealPoints(FairDistillError):
    pass


class SingleGroup(FairDistillError):
    pass


class NotFittedError(FairDistillError, AttributeError):
    pass


# cli
class ConfigError(FairDistillError):
    pass


class ManifestMismatch(FairDistillError):
    pass


class StageError(FairDistillError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class DegenerateTarget(UserWarning):
    """Training labels contain a single class; the forest predicts a constant."""


class RankDeficient(UserWarning):
    """Fewer non-zero principal axes than requested."""
