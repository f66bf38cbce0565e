"""Exception hierarchy.

Everything raised deliberately by the package derives from ``CoAttnError``.
``ValidationError`` marks bad user input (CLI exit code 1); anything else is
a runtime failure (exit code 2).
"""


class CoAttnError(Exception):
    pass


class ValidationError(CoAttnError):
    pass


# tensor core
class DimensionError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class NonFiniteError(CoAttnError):
    pass


class DegenerateVectorError(CoAttnError):
    pass


class GradientEvaluationError(CoAttnError):
    pass


# sentence encoder
class VocabularyError(ValidationError):
    pass


class EmptyStatementError(ValidationError):
    pass


# co-attention / ranking
class DegenerateProbabilityError(ValidationError):
    pass


class LossDefinitionError(ValidationError):
    pass


# dataset
class DatasetError(ValidationError):
    pass


class DatasetParseError(DatasetError):
    pass


class DanglingReferenceError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class SplitError(ValidationError):
    pass


# training / evaluation
class SamplingError(CoAttnError):
    pass


class TrainingError(CoAttnError):
    pass


class EvaluationError(CoAttnError):
    pass


class MetricError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass
