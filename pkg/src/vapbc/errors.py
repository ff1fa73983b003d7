"""Exception types raised across the package."""


class VapError(Exception):
    """Base class for all package errors."""


class NotFound(VapError, FileNotFoundError):
    pass


class UnsupportedFormat(VapError, ValueError):
    pass


class CorruptHeader(VapError, ValueError):
    pass


class EmptyAudio(VapError, ValueError):
    pass


class OutOfRange(VapError, ValueError):
    pass


class InvalidConfig(VapError, ValueError):
    pass


class ConfigMismatch(VapError, ValueError):
    pass


class LengthMismatch(VapError, ValueError):
    pass


class NoForwardPass(VapError, RuntimeError):
    pass


class CheckpointError(VapError, ValueError):
    """Base for unreadable checkpoint files."""


class BadMagic(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class MissingTensor(CheckpointError):
    pass


class CheckpointMissing(VapError, FileNotFoundError):
    pass


class ParseError(VapError, ValueError):
    pass


class OverlapError(VapError, ValueError):
    pass


class NegativeTime(VapError, ValueError):
    pass


class MissingManifest(VapError, FileNotFoundError):
    pass


class MissingAudio(VapError, FileNotFoundError):
    pass


class EmptyCorpus(VapError, ValueError):
    pass


class MissingThreshold(VapError, ValueError):
    pass


class MissingManipulatedAudio(VapError, FileNotFoundError):
    pass


class SessionClosed(VapError, RuntimeError):
    pass


class AudioTooShort(VapError, ValueError):
    pass


class ProtocolError(VapError, ValueError):
    """A malformed wire message; ``code`` is sent back to the client."""

    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code
        self.msg = msg


class BindError(VapError, OSError):
    pass
