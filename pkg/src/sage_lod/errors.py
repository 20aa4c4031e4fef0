"""Exception hierarchy for sage-lod.

Input / format problems raise subclasses of :class:`InputError` so the CLI
can map them to exit code 2; everything else is an internal error (exit 1).
"""


class SageLodError(Exception):
    """Base class for all sage-lod errors."""


class InputError(SageLodError):
    """Invalid user-supplied input (file, config, or argument)."""


class PlyFormatError(InputError):
    """Malformed PLY container. Carries the byte offset of the failure."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class PlySchemaError(InputError):
    """PLY is well-formed but does not carry the expected properties."""


class PlyValidationError(InputError):
    """PLY payload contains invalid values. Carries the vertex index."""

    def __init__(self, message: str, vertex: int | None = None):
        if vertex is not None:
            message = f"{message} (vertex {vertex})"
        super().__init__(message)
        self.vertex = vertex


class CatalogError(InputError):
    """Checkpoint directory tree is inconsistent."""


class ManifestError(InputError):
    """Checkpoint manifest missing or contradicting the directory tree."""


class ColmapParseError(InputError):
    """Malformed COLMAP text file. Carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


class UnsupportedCameraModelError(InputError):
    """COLMAP camera model other than SIMPLE_PINHOLE / PINHOLE."""


class MaskFormatError(InputError):
    """Semantic mask image is not single-channel 8-bit."""


class MaskGeometryError(InputError):
    """Semantic mask dimensions disagree with the associated camera."""


class ProfilingError(SageLodError):
    """Quality profiling could not proceed (e.g. missing ground truth)."""


class InsufficientDataError(SageLodError):
    """Too few samples to fit the distance-quality model."""


class DegenerateFitError(SageLodError):
    """Samples are degenerate (all at one distance); no curve exists."""


class TransferError(SageLodError):
    """Fitted curves share no semantic label with the target scene."""


class CompositionError(SageLodError):
    """Selection plan references a checkpoint absent from the catalog."""
