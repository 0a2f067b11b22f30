"""Exception hierarchy shared across the package.

File-format errors carry the byte offset at which the problem was
detected so that callers (and the CLI) can report a precise location.
"""

from __future__ import annotations


class KvPoolError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(KvPoolError, ValueError):
    """Invalid cache geometry, or a tensor that does not match its geometry."""


class DumpFormatError(KvPoolError):
    """Malformed dump or snapshot file."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class BadMagicError(DumpFormatError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersionError(DumpFormatError):
    """Format version or feature flags this build does not understand."""


class TruncatedFileError(DumpFormatError):
    """File ends before the payload promised by its header."""


class PayloadSizeError(DumpFormatError):
    """Payload length disagrees with the header geometry."""


class NonFiniteValuesError(DumpFormatError):
    """Payload contains NaN or Inf."""


class UnsealedPoolError(KvPoolError):
    """Operation requires a sealed (write-once, read-many) pool."""


class CorruptBlockError(KvPoolError):
    """Quantized block violates its own invariants (e.g. out-of-range codes)."""
