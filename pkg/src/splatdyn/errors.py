"""Exception types raised across the package."""


class SplatDynError(Exception):
    """Base class for all package errors."""


class OutOfRange(SplatDynError, ValueError):
    """A point quantizes outside the addressable 16-bit grid."""


class FieldOverflow(SplatDynError, ValueError):
    """A value does not fit the bit width of its serialization-code field."""

    def __init__(self, field, value, bits):
        self.field = field
        self.value = value
        self.bits = bits
        super().__init__(f"{field} value {value} does not fit in {bits} bits")


class ShapeMismatch(SplatDynError, ValueError):
    pass


class BehindCamera(SplatDynError, ValueError):
    pass


class IndexOutOfRange(SplatDynError, IndexError):
    pass


class LengthMismatch(SplatDynError, ValueError):
    pass


class BadMagic(SplatDynError, ValueError):
    pass


class BadVersion(SplatDynError, ValueError):
    pass


class Truncated(SplatDynError, ValueError):
    """File ended before a complete record could be read."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
