"""Error taxonomy shared by every stage of the pipeline.

The CLI prints the class name of any :class:`DamageLabError` it catches, so
the names double as the user-facing error vocabulary.
"""


class DamageLabError(Exception):
    """Base class for all domain errors."""


# ingest
class MalformedLabelFile(DamageLabError):
    pass


class UnknownDisasterType(DamageLabError):
    pass


class InvalidPolygon(DamageLabError):
    pass


class EmptyDataset(DamageLabError):
    pass


# preprocess
class InvalidBBox(DamageLabError):
    pass


class InsufficientClass(DamageLabError):
    pass


class InvalidRatio(DamageLabError):
    pass


class DuplicateUid(DamageLabError):
    pass


class IoFailure(DamageLabError):
    pass


# losses
class EmptyBatch(DamageLabError):
    pass


class NonFinite(DamageLabError):
    pass


# model
class ShapeMismatch(DamageLabError):
    pass


class WeightLoadFailure(DamageLabError):
    pass


class ConfigMismatch(DamageLabError):
    pass


# trainer
class DivergenceDetected(DamageLabError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
        self.epoch = epoch
        self.loss = loss


class EmptyEvalSet(DamageLabError):
    pass


# gradcam
class UnknownLayer(DamageLabError):
    pass


class NonScalarTarget(DamageLabError):
    pass


# synthdata
class InfeasiblePacking(DamageLabError):
    pass
