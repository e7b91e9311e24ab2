"""Exception types raised across the package."""


class OccAwareError(Exception):
    """Base class for all package errors."""


class EmptyMask(OccAwareError, ValueError):
    pass


class ShapeMismatch(OccAwareError, ValueError):
    pass


class EmptyClassSet(OccAwareError, ValueError):
    pass


class BadSpec(OccAwareError, ValueError):
    pass


class MissingVideo(OccAwareError, KeyError):
    pass


class DuplicateEntry(OccAwareError, ValueError):
    pass


class EmptyDataset(OccAwareError, ValueError):
    pass


class HookMismatch(OccAwareError, ValueError):
    pass


class InvalidDeclaration(OccAwareError, ValueError):
    pass


class ChannelMismatch(ShapeMismatch):
    pass


class DegenerateBatch(OccAwareError, ValueError):
    pass


class LabelOutOfRange(OccAwareError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class FrozenContractViolation(OccAwareError, RuntimeError):
    """A frozen detector's weights changed, or a frozen net was handed to training."""


class CheckpointError(OccAwareError, ValueError):
    pass
