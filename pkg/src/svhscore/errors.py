"""Exception hierarchy.

``ValidationError`` covers bad inputs (CLI exit code 1); ``PipelineError``
covers failures while running (CLI exit code 2).
"""


class SvhError(Exception):
    pass


class ValidationError(SvhError, ValueError):
    pass


class PipelineError(SvhError, RuntimeError):
    pass


class MalformedManifest(ValidationError):
    pass


class ScoreOutOfRange(ValidationError):
    pass


class MissingScore(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class NotNormalized(ValidationError):
    pass


class EmptySet(ValidationError):
    pass


class EmptyEnsemble(ValidationError):
    pass


class MissingPrediction(ValidationError):
    pass


class TooFewPatients(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class NoContent(PipelineError):
    pass


class CenterOutsideBox(PipelineError):
    pass


class CenterLost(PipelineError):
    pass


class GeometryOverflow(PipelineError):
    pass


class NoSupervision(PipelineError):
    pass


class NonFiniteLoss(PipelineError):
    pass


class IoFailure(PipelineError):
    pass
