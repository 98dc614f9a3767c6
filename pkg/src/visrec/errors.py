"""Exception types raised across the package."""


class VisrecError(Exception):
    """Base class for all package errors."""


class ZeroVector(VisrecError, ValueError):
    pass


class DimensionMismatch(VisrecError, ValueError):
    pass


class NotNormalized(VisrecError, ValueError):
    pass


class InvalidItem(VisrecError, ValueError):
    pass


class InsufficientData(VisrecError, ValueError):
    pass


class SnapshotError(VisrecError, ValueError):
    """Snapshot file is truncated, has a bad magic/version, or fails its CRC."""


class EmptyIndex(VisrecError, LookupError):
    pass


class UnknownItem(VisrecError, KeyError):
    pass


class UndefinedMetric(VisrecError, ValueError):
    """nDCG requested for a ranking with zero ideal gain."""


class MalformedLog(VisrecError, ValueError):
    def __init__(self, line_no: int, reason: str):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no
        self.reason = reason


class AlignmentError(VisrecError, ValueError):
    pass


class EncoderError(VisrecError):
    """Base class for encoder failures; these are the retryable ones."""


class EncoderTimeout(EncoderError):
    pass


class RemoteUnavailable(EncoderError):
    pass


class BadDimension(EncoderError):
    pass


class BadPayload(EncoderError):
    pass


class PcaNotLoaded(VisrecError, RuntimeError):
    pass


class IndexClosed(VisrecError, RuntimeError):
    pass


class FileUnreadable(VisrecError, OSError):
    pass


class PcaDimensionMismatch(VisrecError, ValueError):
    pass


class QueueFull(VisrecError, RuntimeError):
    pass
