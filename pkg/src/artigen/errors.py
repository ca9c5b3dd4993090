"""Exception hierarchy shared across the toolkit."""


class ArtigenError(Exception):
    """Base class for all toolkit errors."""


class InvalidMesh(ArtigenError):
    pass


class ThickeningFailed(ArtigenError):
    pass


class InvalidArgument(ArtigenError):
    pass


class EmptySurface(ArtigenError):
    pass


class InvalidKinematicTree(ArtigenError):
    pass


class MeshResolutionError(ArtigenError):
    pass


class InvalidLimits(ArtigenError):
    pass


class LimitViolation(ArtigenError):
    pass


class SchemaError(ArtigenError):
    pass


class TrainingDiverged(ArtigenError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


class GenerationFailed(ArtigenError):
    pass


class DegenerateConfiguration(ArtigenError):
    pass


class AlignmentRejected(ArtigenError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
