"""Exception hierarchy shared by every hdgraph module."""


class HdgError(Exception):
    """Base class for all library errors."""


class ValidationError(HdgError):
    """Bad input or configuration; the CLI maps these to exit code 1."""


class NormalizationError(ValidationError):
    pass


class DimensionError(ValidationError):
    pass


class EmptySetError(ValidationError):
    pass


class MissingChannelError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DegenerateGraphError(ValidationError):
    pass


class GraphMismatchError(ValidationError):
    pass


class MatrixMismatchError(ValidationError):
    pass


class BoxError(ValidationError):
    pass


class NoPositiveError(ValidationError):
    pass


class FormatError(ValidationError):
    pass


class DataError(ValidationError):
    pass


class TrainingDivergedError(HdgError):
    """Loss became non-finite during GCN training."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss})")
        self.epoch = epoch
        self.loss = loss
