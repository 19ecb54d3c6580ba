"""Exception types shared across the package.

The CLI maps these onto its exit-code contract (see cli.py): config and
input-file problems exit 2, shape mismatches exit 3, numerically degenerate
states exit 4.
"""


class MaskfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(MaskfuseError):
    """Array shapes or dimensions do not match the operation's contract."""


class ConfigError(MaskfuseError):
    """Config text is malformed, has unknown keys, or violates an invariant."""


class DegenerateRowError(MaskfuseError):
    """An attention row lost all of its mass during filtering."""

    def __init__(self, row: int, message: str | None = None):
        self.row = row
        super().__init__(message or f"attention row {row} became all-zero after sink filtering")


class UnknownSubjectError(MaskfuseError):
    """A subject id was requested that the config does not define."""


class UnknownAttachmentError(MaskfuseError):
    """An adapter attachment point outside {Q, K, V, FF} was referenced."""


class TensorFormatError(MaskfuseError):
    """Base class for tensor-file format violations."""


class BadMagicError(TensorFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(TensorFormatError):
    """File declares a format version this reader does not support."""


class TruncatedPayloadError(TensorFormatError):
    """Header or payload is shorter/longer than the declared shape requires."""


class NonFiniteValuesError(TensorFormatError):
    """Payload contains NaN or infinite values."""
