"""Exception hierarchy.

Every error carries a short ``category`` string so the CLI can report
failures as machine-readable objects.
"""


class CocoError(Exception):
    category = "error"


class FormatError(CocoError):
    category = "format"


class ConsistencyError(CocoError):
    category = "consistency"


class DataError(CocoError):
    category = "data"


class MissingPredictionError(CocoError):
    category = "missing-prediction"


class EmptyInputError(CocoError):
    category = "empty-input"


class EmptyClusterError(CocoError):
    category = "empty-cluster"

    def __init__(self, message, tag=None):
        super().__init__(message)
        self.tag = tag


class SummarizationFailedError(CocoError):
    category = "summarization-failed"


class NoPositivesError(CocoError):
    category = "no-positives"


class NoConceptsError(CocoError):
    category = "no-concepts"


class InsufficientPointsError(CocoError):
    category = "insufficient-points"


class TrainingDivergedError(CocoError):
    category = "training-diverged"

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ConfigError(CocoError):
    category = "config"
