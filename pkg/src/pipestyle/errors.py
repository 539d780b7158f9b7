"""Exception types shared across the package."""


class PipestyleError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(PipestyleError):
    pass


class InvalidShape(PipestyleError):
    pass


class ConstantVolume(PipestyleError):
    pass


class ConstantInput(PipestyleError):
    pass


class NotNormalized(PipestyleError):
    pass


class EmptyInput(PipestyleError):
    pass


class DuplicateGroup(PipestyleError):
    pass


class InvalidK(PipestyleError):
    pass


class IoFailure(PipestyleError):
    pass


class SingleDomainDataset(PipestyleError):
    pass


class NoWeights(PipestyleError):
    pass


class InvalidRange(PipestyleError):
    pass


class OutOfRangeT(PipestyleError):
    pass


class CondKindMismatch(PipestyleError):
    pass


class EmptyPool(PipestyleError):
    pass


class NTooLarge(PipestyleError):
    pass


class UnpairedData(PipestyleError):
    pass


class UnknownLabel(PipestyleError):
    pass


class PairingUnavailable(PipestyleError):
    pass


class DirectionMismatch(PipestyleError):
    pass


class UnknownDomain(PipestyleError):
    pass


class EmptySet(PipestyleError):
    pass


class InsufficientTestData(PipestyleError):
    pass


class DomainSetMismatch(PipestyleError):
    pass


class ConfigInvalid(PipestyleError):
    pass
