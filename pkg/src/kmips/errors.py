"""Exception types shared across the package."""


class FormatError(ValueError):
    """A file does not conform to its binary format (magic, version, length)."""


class ValidationError(ValueError):
    """Structurally valid data violates a content invariant (e.g. NaN entries)."""
