"""Exception hierarchy shared by all hdrmask modules."""


class HdrMaskError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(HdrMaskError):
    """Shapes or extents are inconsistent with an operation's contract."""


class DomainError(HdrMaskError):
    """Input values fall outside the documented domain (e.g. LDR not in [0,1])."""


class NumericError(HdrMaskError):
    """A computation produced NaN/Inf or would overflow."""


class GraphError(HdrMaskError):
    """The differentiation graph is malformed (e.g. contains a cycle)."""


class ContractError(HdrMaskError):
    """An API precondition was violated (e.g. backward from a non-scalar)."""


class FormatError(HdrMaskError):
    """A file could not be parsed. Carries a byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UnsupportedFormatError(FormatError):
    """The file is recognized but uses an unsupported variant."""


class ChecksumError(FormatError):
    """Stored checksum does not match the payload."""


class VersionError(FormatError):
    """File format version is not supported."""


class CheckpointShapeError(FormatError):
    """Checkpoint layer manifest does not match the target configuration."""

    def __init__(self, message, mismatches=()):
        super().__init__(message)
        self.mismatches = tuple(mismatches)
