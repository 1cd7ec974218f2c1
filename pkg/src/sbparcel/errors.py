"""Exception types raised across the package."""


class SBPError(ValueError):
    """Base class for all validation and data errors."""


class ConstantSeries(SBPError):
    def __init__(self, voxel_id):
        super().__init__(f"time course of {voxel_id!r} has zero variance")
        self.voxel_id = voxel_id


class DimensionMismatch(SBPError):
    pass


class EmptyCohort(SBPError):
    pass


class DegenerateOutcome(SBPError):
    pass


class TooFewSubjects(SBPError):
    pass


class ParseError(SBPError):
    pass


class MissingOutcome(SBPError):
    def __init__(self, subject_id):
        super().__init__(f"no outcome row for subject {subject_id!r}")
        self.subject_id = subject_id


class InconsistentVoxelSet(SBPError):
    pass


class KOutOfRange(SBPError):
    pass


class ConvergenceFailure(SBPError):
    pass


class InvalidLabels(SBPError):
    pass


class IndexOutOfRange(SBPError):
    pass


class EmptyNode(SBPError):
    def __init__(self, node):
        super().__init__(f"node {node} has no member voxels")
        self.node = node


class DegenerateTruth(SBPError):
    pass


class EmptySet(SBPError):
    pass


class VoxelUniverseMismatch(SBPError):
    pass


class InvalidSpec(SBPError):
    pass


class MissingModelArtifact(SBPError):
    pass


class NoEdgesSelected(UserWarning):
    """CPM found no edge below the selection threshold; an intercept-only model is used."""
