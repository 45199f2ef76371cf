# salientpose/exceptions.py
"""Error taxonomy shared by the library and the command line.

Each error carries the process exit code the CLI uses for it. All of them are
also ``ValueError`` subclasses so library callers can catch them generically.
"""


class SalientPoseError(ValueError):
    """Base class for every error raised on purpose by salientpose."""

    exit_code = 1


# --- Input parsing (exit code 3) ---


class InputParseError(SalientPoseError):
    """An input file could not be parsed."""

    exit_code = 3


class PlyParseError(InputParseError):
    """Malformed PLY body (truncated data, bad numbers, non-finite values)."""


class PlyHeaderError(PlyParseError):
    """Malformed or unsupported PLY header."""


class NonTriangularFaceError(PlyParseError):
    """A face element lists a vertex count other than three."""

    def __init__(self, face_index, count):
        self.face_index = face_index
        self.count = count
        super().__init__(
            f"face {face_index} has {count} vertex indices; only triangles are supported"
        )


class FaceIndexError(PlyParseError):
    """A face references a vertex index outside the vertex list."""

    def __init__(self, face_index, vertex_index, vertex_count):
        self.face_index = face_index
        self.vertex_index = vertex_index
        self.vertex_count = vertex_count
        super().__init__(
            f"face {face_index} references vertex {vertex_index} "
            f"but the file declares only {vertex_count} vertices"
        )


class BopFormatError(InputParseError):
    """A BOP JSON record is missing keys or holds invalid numbers."""

    def __init__(self, message, image_id=None, entry_index=None, path=None):
        self.image_id = image_id
        self.entry_index = entry_index
        self.path = path
        where = []
        if path is not None:
            where.append(str(path))
        if image_id is not None:
            where.append(f"image {image_id}")
        if entry_index is not None:
            where.append(f"entry {entry_index}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(f"{prefix}{message}")


class ResultsFormatError(InputParseError):
    """A row of a bop19 results CSV is malformed."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(f"{prefix}{message}")


# --- Pipeline preconditions (exit code 4) ---


class PipelineError(SalientPoseError):
    """Inputs parsed fine but a pipeline precondition does not hold."""

    exit_code = 4


class DegenerateMeshError(PipelineError):
    """The mesh has no usable surface (zero total area, too few vertices)."""


class InsufficientSamplesError(PipelineError):
    """Too few (visible) surface samples for the neighbourhood size."""


class PlacementError(PipelineError):
    """Scene instances could not be placed without overlap."""


class CameraPlacementError(PipelineError):
    """No camera pose satisfied the in-view constraint."""


class UnknownReferenceError(PipelineError):
    """An estimate references an object, scene or image that does not exist."""


class MissingModelError(PipelineError):
    """A model file needed for evaluation or rendering is missing."""


class BehindCameraError(PipelineError):
    """Ground-truth model vertices project from behind the camera."""
