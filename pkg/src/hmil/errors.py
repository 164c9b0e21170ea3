"""Exception types shared across the package."""


class HmilError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(HmilError):
    """Structurally incongruent nodes (variant, dimension, or key-set disagreement)."""


class IndexOutOfRange(HmilError):
    """A sample index outside [0, sample_count)."""


class DepthExceeded(HmilError):
    """Nesting deeper than the configured maximum; signals pathological input."""


class EmptySchema(HmilError):
    """An extractor was requested for a schema that has seen no documents."""


class EmptyBatch(HmilError):
    """A loss was requested for zero samples."""


class SingleClass(HmilError):
    """Training requires at least two distinct labels."""


class UnknownLabel(HmilError):
    """An evaluation label is absent from the bundle's class index."""


class VersionMismatch(HmilError):
    """A serialized artifact carries an unsupported format version."""


class CorruptContainer(HmilError):
    """A serialized artifact is truncated or fails its checksum."""


class InvalidFormat(HmilError):
    """A JSON artifact file lacks the expected format header."""


class ParseError(HmilError):
    """A document could not be parsed; carries the offending location."""

    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line
