"""Exception hierarchy shared by every ddml module."""


class DDMLError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class UnknownFeature(DDMLError):
    pass


class UnknownLevel(DDMLError):
    pass


class ShapeMismatch(DDMLError):
    pass


class EmptyBatch(DDMLError):
    pass


class EmptyList(DDMLError):
    pass


class PoolTooSmall(DDMLError):
    pass


class DeltaOutOfRange(DDMLError):
    pass


class BadMagic(DDMLError):
    pass


class TruncatedFile(DDMLError):
    pass


class CountMismatch(DDMLError):
    pass


class BindFailure(DDMLError):
    pass
