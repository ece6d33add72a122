"""Exception types shared across the package."""


class MutualFormerError(Exception):
    pass


class ShapeError(MutualFormerError, ValueError):
    pass


class DegenerateSimilarityError(MutualFormerError, ValueError):
    """A similarity matrix has a zero (or negative) row sum or negative entries."""


class NonFiniteError(MutualFormerError, FloatingPointError):
    pass


class UsageError(MutualFormerError, ValueError):
    pass


class ConfigError(MutualFormerError, ValueError):
    pass


class MetricUndefinedError(MutualFormerError, ValueError):
    pass


class CheckpointFormatError(MutualFormerError):
    pass


class TrainingDivergedError(MutualFormerError):
    def __init__(self, message, epoch=None, batch_id=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_id = batch_id
