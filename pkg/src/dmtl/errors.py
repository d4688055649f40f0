"""Exception taxonomy shared by all dmtl modules."""


class DmtlError(Exception):
    """Base class for all errors raised by this library."""


class DimensionError(DmtlError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(DmtlError):
    """A scalar function was applied outside its mathematical domain."""


class ContractError(DmtlError):
    """A documented precondition was violated by the caller."""


class ArchitectureError(DmtlError):
    """A layer stack fails the static shape check or a head/trunk width mismatch."""


class DegenerateBatchError(DmtlError):
    """Batch statistics are undefined for the given batch size."""


class LabelError(DmtlError):
    """A label value violates the attribute catalog."""


class FormatError(DmtlError):
    """A text or binary input does not follow its documented format."""


class CheckpointError(DmtlError):
    """A checkpoint file failed to load."""


class ChecksumError(CheckpointError):
    """Checkpoint integrity checksum does not match the file contents."""


class VersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class DigestError(CheckpointError):
    """Checkpoint catalog digest does not match the expected catalog."""


class GradientCheckError(DmtlError):
    """A finite-difference gradient check exceeded its error bound."""


class NumericalError(DmtlError):
    """A computation produced a non-finite or otherwise invalid value."""
