# File: geosurge/errors.py
"""Exception hierarchy shared by every geosurge module.

All errors derive from ``ValueError`` through :class:`GeoSurgeError` so callers
that only know about ``ValueError`` keep working.
"""


class GeoSurgeError(ValueError):
    """Base class for all domain errors."""


class ConfigError(GeoSurgeError):
    """Invalid, missing or unknown configuration."""


class ShapeError(GeoSurgeError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {joined}")


class NonFiniteError(GeoSurgeError):
    """A tensor primitive produced NaN or Inf."""


class TapeError(GeoSurgeError):
    """The gradient tape was used out of order."""


class DataError(GeoSurgeError):
    """Malformed input data or file."""


class _FileOffsetError(DataError):
    kind = "format error"

    def __init__(self, path, offset: int, detail: str = ""):
        self.path = str(path)
        self.offset = offset
        msg = f"{self.kind} in {self.path} at offset {offset}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class BadMagicError(_FileOffsetError):
    kind = "bad magic"


class VersionMismatchError(_FileOffsetError):
    kind = "version mismatch"


class BlobShapeError(_FileOffsetError):
    kind = "shape mismatch"


class TruncatedPayloadError(_FileOffsetError):
    kind = "truncated payload"


class IntegrityError(GeoSurgeError):
    """Artifacts disagree with each other (hash mismatch, missing tensors, broken links)."""
