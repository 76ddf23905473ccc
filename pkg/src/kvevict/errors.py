"""Exception hierarchy.

Every error raised by the library derives from :class:`KVEvictError`, which is a
``ValueError`` so callers validating input can catch it generically.
"""


class KVEvictError(ValueError):
    pass


class EmptyKeepSetError(KVEvictError):
    pass


class NonFiniteInputError(KVEvictError):
    pass


class BadTokenError(KVEvictError):
    pass


class BadAlphaError(KVEvictError):
    pass


class BadWindowError(KVEvictError):
    pass


class RowShapeMismatchError(KVEvictError):
    pass


class EmptyHeadError(KVEvictError):
    pass


class UnknownTokenError(KVEvictError):
    pass


class ZeroBudgetError(KVEvictError):
    pass


class BudgetTooSmallForHybridError(KVEvictError):
    pass


class ShapeMismatchError(KVEvictError):
    pass


class ZeroVectorError(KVEvictError):
    pass


class ConfigError(KVEvictError):
    pass


class TraceFormatError(KVEvictError):
    """Base for problems found while decoding a trace file."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    pass


class ChecksumMismatchError(TraceFormatError):
    pass


class TruncatedTraceError(TraceFormatError):
    pass


class InvariantViolationError(TraceFormatError):
    """A trace row breaks nonnegativity, causality or row-stochasticity.

    ``location`` holds ``(layer, head, q, k)`` of the first offending entry;
    ``k`` is ``None`` when the whole row is at fault (bad row sum).
    """

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class NothingToWriteError(KVEvictError):
    pass
