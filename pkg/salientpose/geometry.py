# salientpose/geometry.py
"""Triangle meshes in millimetres: PLY I/O, diameter, surface sampling, normals.

Units are millimetres throughout (BOP model convention); nothing here converts
units implicitly.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import cdist, pdist

from .exceptions import (
    DegenerateMeshError,
    FaceIndexError,
    NonTriangularFaceError,
    PlyHeaderError,
    PlyParseError,
)
from .file_utils import atomic_write

logger = logging.getLogger(__name__)

# Exact pairwise diameter up to this many vertices, hull-reduced above.
EXACT_DIAMETER_LIMIT = 2048
_DIAMETER_BLOCK = 2048
_NORMAL_TOLERANCE = 1e-6

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def _frozen(array, dtype):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


# --- Domain types ---


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Triangle mesh; vertices in mm, triangles as vertex-index triples."""

    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: Optional[np.ndarray] = None

    def __post_init__(self):
        vertices = _frozen(self.vertices, np.float64).reshape(-1, 3)
        triangles = _frozen(self.triangles, np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ValueError("mesh vertices must be finite")
        if triangles.size and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise ValueError(
                f"triangle indices must lie in [0, {len(vertices)}), "
                f"got range [{triangles.min()}, {triangles.max()}]"
            )
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if self.vertex_normals is not None:
            normals = _frozen(self.vertex_normals, np.float64).reshape(-1, 3)
            if normals.shape != vertices.shape:
                raise ValueError("vertex_normals must hold one normal per vertex")
            lengths = np.linalg.norm(normals, axis=1)
            if np.any(np.abs(lengths - 1.0) > _NORMAL_TOLERANCE):
                raise ValueError("vertex normals must have unit length")
            object.__setattr__(self, "vertex_normals", normals)

    @property
    def vertex_count(self):
        return len(self.vertices)

    @property
    def triangle_count(self):
        return len(self.triangles)

    def triangle_corners(self):
        """Returns three (M, 3) arrays with the corners of every triangle."""
        tri = self.triangles
        return self.vertices[tri[:, 0]], self.vertices[tri[:, 1]], self.vertices[tri[:, 2]]

    def triangle_areas(self):
        v0, v1, v2 = self.triangle_corners()
        return 0.5 * np.linalg.norm(np.cross(v1 - v0, v2 - v0), axis=1)


@dataclass(frozen=True, eq=False)
class SurfaceSamples:
    """Points drawn on a mesh surface, with their unit normals."""

    points: np.ndarray
    normals: np.ndarray
    source_triangle: np.ndarray
    mean_spacing: float

    def __post_init__(self):
        points = _frozen(self.points, np.float64).reshape(-1, 3)
        normals = _frozen(self.normals, np.float64).reshape(-1, 3)
        source = _frozen(self.source_triangle, np.int64).reshape(-1)
        if not (len(points) == len(normals) == len(source)):
            raise ValueError("points, normals and source_triangle must have equal length")
        if not self.mean_spacing > 0:
            raise ValueError(f"mean_spacing must be > 0, got {self.mean_spacing}")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "normals", normals)
        object.__setattr__(self, "source_triangle", source)
        object.__setattr__(self, "mean_spacing", float(self.mean_spacing))

    def __len__(self):
        return len(self.points)


# --- PLY reading ---


def _parse_header(fh, path):
    first = fh.readline().strip()
    if first != b"ply":
        raise PlyHeaderError(f"{path}: missing 'ply' magic line")
    fmt = None
    elements = []
    for _ in range(100_000):
        raw = fh.readline()
        if not raw:
            raise PlyHeaderError(f"{path}: header ended without 'end_header'")
        try:
            line = raw.decode("ascii").strip()
        except UnicodeDecodeError:
            raise PlyHeaderError(f"{path}: non-ASCII bytes in header")
        if not line or line.startswith(("comment", "obj_info")):
            continue
        parts = line.split()
        keyword = parts[0]
        if keyword == "end_header":
            break
        if keyword == "format":
            if len(parts) != 3 or parts[1] not in ("ascii", "binary_little_endian"):
                raise PlyHeaderError(
                    f"{path}: unsupported format line '{line}' "
                    "(ascii and binary_little_endian are supported)"
                )
            fmt = parts[1]
        elif keyword == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise PlyHeaderError(f"{path}: malformed element line '{line}'")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif keyword == "property":
            if not elements:
                raise PlyHeaderError(f"{path}: property '{line}' declared before any element")
            element = elements[-1]
            if len(parts) == 5 and parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise PlyHeaderError(
                        f"{path}: element '{element['name']}' list property has unknown type in '{line}'"
                    )
                element["props"].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            elif len(parts) == 3 and parts[1] in _PLY_TYPES:
                element["props"].append((parts[2], _PLY_TYPES[parts[1]]))
            else:
                raise PlyHeaderError(
                    f"{path}: element '{element['name']}' has malformed property line '{line}'"
                )
        else:
            raise PlyHeaderError(f"{path}: unknown header keyword '{keyword}'")
    else:
        raise PlyHeaderError(f"{path}: header too long")
    if fmt is None:
        raise PlyHeaderError(f"{path}: missing format line")
    return fmt, elements


def _is_list(prop_type):
    return isinstance(prop_type, tuple)


def _read_binary_element(body, offset, element, path):
    """Returns (columns dict, new offset) for one binary element."""
    name, count, props = element["name"], element["count"], element["props"]
    if not any(_is_list(t) for _, t in props):
        dtype = np.dtype([(p, "<" + t) for p, t in props])
        needed = dtype.itemsize * count
        if len(body) - offset < needed:
            raise PlyParseError(f"{path}: element '{name}' is truncated")
        data = np.frombuffer(body, dtype=dtype, count=count, offset=offset)
        return {p: data[p] for p, _ in props}, offset + needed

    if len(props) == 1:
        # Fast path: a lone list property whose rows all have three entries.
        prop_name, (_, count_t, item_t) = props[0]
        dtype = np.dtype([("n", "<" + count_t), ("idx", "<" + item_t, (3,))])
        available = (len(body) - offset) // dtype.itemsize
        data = np.frombuffer(body, dtype=dtype, count=min(count, available), offset=offset)
        bad = np.nonzero(data["n"] != 3)[0]
        if bad.size:
            if name == "face":
                raise NonTriangularFaceError(int(bad[0]), int(data["n"][bad[0]]))
        elif available >= count:
            return {prop_name: data["idx"]}, offset + dtype.itemsize * count
        elif name == "face":
            raise PlyParseError(f"{path}: element '{name}' is truncated")

    # General path: row by row.
    columns = {p: [] for p, _ in props}
    for row in range(count):
        for prop_name, prop_type in props:
            try:
                if _is_list(prop_type):
                    _, count_t, item_t = prop_type
                    (n,) = struct.unpack_from("<" + count_t, body, offset)
                    offset += struct.calcsize(count_t)
                    if name == "face" and prop_name in ("vertex_indices", "vertex_index") and n != 3:
                        raise NonTriangularFaceError(row, n)
                    items = struct.unpack_from(f"<{n}{item_t}", body, offset)
                    offset += struct.calcsize(item_t) * n
                    columns[prop_name].append(items)
                else:
                    (value,) = struct.unpack_from("<" + prop_type, body, offset)
                    offset += struct.calcsize(prop_type)
                    columns[prop_name].append(value)
            except struct.error:
                raise PlyParseError(f"{path}: element '{name}' is truncated at row {row}")
    return columns, offset


def _read_ascii_element(tokens, pos, element, path):
    """Returns (columns dict, new token position) for one ASCII element."""
    name, count, props = element["name"], element["count"], element["props"]
    if not any(_is_list(t) for _, t in props):
        n = count * len(props)
        if len(tokens) - pos < n:
            raise PlyParseError(f"{path}: element '{name}' is truncated")
        try:
            block = np.array(tokens[pos:pos + n], dtype=np.float64).reshape(count, len(props))
        except ValueError:
            raise PlyParseError(f"{path}: element '{name}' holds a non-numeric value")
        return {p: block[:, i] for i, (p, _) in enumerate(props)}, pos + n

    columns = {p: [] for p, _ in props}
    try:
        for row in range(count):
            for prop_name, prop_type in props:
                if _is_list(prop_type):
                    n = int(tokens[pos])
                    pos += 1
                    if name == "face" and prop_name in ("vertex_indices", "vertex_index") and n != 3:
                        raise NonTriangularFaceError(row, n)
                    columns[prop_name].append(tuple(int(float(t)) for t in tokens[pos:pos + n]))
                    if len(columns[prop_name][-1]) != n:
                        raise IndexError
                    pos += n
                else:
                    columns[prop_name].append(float(tokens[pos]))
                    pos += 1
    except IndexError:
        raise PlyParseError(f"{path}: element '{name}' is truncated at row {row}")
    except ValueError as e:
        if isinstance(e, NonTriangularFaceError):
            raise
        raise PlyParseError(f"{path}: element '{name}' row {row} holds a non-numeric value")
    return columns, pos


def _face_indices(columns, element, path):
    list_props = [p for p, t in element["props"] if _is_list(t)]
    for candidate in ("vertex_indices", "vertex_index"):
        if candidate in columns:
            key = candidate
            break
    else:
        if len(list_props) != 1:
            raise PlyHeaderError(f"{path}: element 'face' has no vertex_indices list property")
        key = list_props[0]
    faces = columns[key]
    if isinstance(faces, np.ndarray):
        return faces.astype(np.int64).reshape(-1, 3)
    for i, f in enumerate(faces):
        if len(f) != 3:
            raise NonTriangularFaceError(i, len(f))
    return np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path):
    """
    Loads a triangle mesh from an ASCII or binary little-endian PLY file.

    Args:
        path: Path to the PLY file.

    Returns:
        TriMesh: Vertices in file order; normals if the file has nx/ny/nz.

    Raises:
        FileNotFoundError: The file does not exist.
        PlyHeaderError: Malformed header or missing x/y/z.
        NonTriangularFaceError: A face that is not a triangle.
        FaceIndexError: A face index outside the vertex list.
        PlyParseError: Truncated or non-numeric body, non-finite coordinates.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh, path)
        body = fh.read()

    names = [e["name"] for e in elements]
    if "vertex" not in names:
        raise PlyHeaderError(f"{path}: no 'vertex' element")

    columns_by_element = {}
    if fmt == "binary_little_endian":
        offset = 0
        for element in elements:
            columns_by_element[element["name"]], offset = _read_binary_element(body, offset, element, path)
    else:
        try:
            tokens = body.decode("ascii").split()
        except UnicodeDecodeError:
            raise PlyParseError(f"{path}: ASCII body holds non-ASCII bytes")
        pos = 0
        for element in elements:
            columns_by_element[element["name"]], pos = _read_ascii_element(tokens, pos, element, path)

    vertex_cols = columns_by_element["vertex"]
    missing = [axis for axis in ("x", "y", "z") if axis not in vertex_cols]
    if missing:
        raise PlyHeaderError(f"{path}: element 'vertex' lacks properties {missing}")
    vertices = np.column_stack([np.asarray(vertex_cols[a], dtype=np.float64) for a in ("x", "y", "z")])
    if not np.all(np.isfinite(vertices)):
        bad = int(np.nonzero(~np.all(np.isfinite(vertices), axis=1))[0][0])
        raise PlyParseError(f"{path}: vertex {bad} has a non-finite coordinate")

    normals = None
    if all(a in vertex_cols for a in ("nx", "ny", "nz")):
        normals = np.column_stack([np.asarray(vertex_cols[a], dtype=np.float64) for a in ("nx", "ny", "nz")])
        lengths = np.linalg.norm(normals, axis=1)
        usable = np.isfinite(lengths) & (lengths > 1e-12)
        normals[usable] /= lengths[usable, None]
        normals[~usable] = (0.0, 0.0, 1.0)

    triangles = np.zeros((0, 3), dtype=np.int64)
    if "face" in columns_by_element:
        face_element = elements[names.index("face")]
        triangles = _face_indices(columns_by_element["face"], face_element, path)
        out_of_range = (triangles < 0) | (triangles >= len(vertices))
        if out_of_range.any():
            face, corner = (int(i) for i in np.argwhere(out_of_range)[0])
            raise FaceIndexError(face, int(triangles[face, corner]), len(vertices))

    mesh = TriMesh(vertices, triangles, normals)
    logger.info(f"Loaded mesh {path}: {mesh.vertex_count} vertices, {mesh.triangle_count} triangles")
    return mesh


# --- PLY writing ---


def save_mesh(mesh, path, binary=True, precision="double"):
    """
    Writes a mesh as PLY.

    ``precision='double'`` makes a save/load round trip bit-exact; ``'float'``
    matches the float32 layout of BOP model files.
    """
    if precision not in ("double", "float"):
        raise ValueError(f"precision must be 'double' or 'float', got {precision!r}")
    fmt = "binary_little_endian" if binary else "ascii"
    has_normals = mesh.vertex_normals is not None
    vertex_props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_normals else [])

    header = [
        "ply",
        f"format {fmt} 1.0",
        "comment written by salientpose",
        f"element vertex {mesh.vertex_count}",
    ]
    header += [f"property {precision} {p}" for p in vertex_props]
    header += [
        f"element face {mesh.triangle_count}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    columns = [mesh.vertices] + ([mesh.vertex_normals] if has_normals else [])
    vertex_data = np.hstack(columns)

    with atomic_write(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            vdtype = np.dtype([(p, "<f8" if precision == "double" else "<f4") for p in vertex_props])
            vrecords = np.empty(mesh.vertex_count, dtype=vdtype)
            for i, p in enumerate(vertex_props):
                vrecords[p] = vertex_data[:, i]
            fh.write(vrecords.tobytes())
            fdtype = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            frecords = np.empty(mesh.triangle_count, dtype=fdtype)
            frecords["n"] = 3
            frecords["idx"] = mesh.triangles
            fh.write(frecords.tobytes())
        else:
            cast = float if precision == "double" else (lambda v: float(np.float32(v)))
            lines = [" ".join(repr(cast(v)) for v in row) for row in vertex_data]
            lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles.tolist()]
            fh.write(("\n".join(lines) + ("\n" if lines else "")).encode("ascii"))
    logger.info(f"Saved mesh to {path} ({fmt}, {precision})")


# --- Statistics ---


def _max_pairwise_distance(points):
    if len(points) <= _DIAMETER_BLOCK:
        return float(pdist(points).max())
    best = 0.0
    for start in range(0, len(points), _DIAMETER_BLOCK):
        block = points[start:start + _DIAMETER_BLOCK]
        best = max(best, float(cdist(block, points[start:]).max()))
    return best


def mesh_diameter(mesh):
    """
    Largest distance between two vertices, in mm.

    Exact pairwise search up to EXACT_DIAMETER_LIMIT vertices. Larger meshes are
    reduced to their convex-hull vertices first; the diameter is attained on the
    hull, so the value is the same.
    """
    points = mesh.vertices
    if len(points) < 2:
        raise DegenerateMeshError(f"diameter needs at least 2 vertices, mesh has {len(points)}")
    if len(points) > EXACT_DIAMETER_LIMIT:
        try:
            hull = ConvexHull(points)
            points = points[np.sort(hull.vertices)]
            logger.debug(f"Diameter: reduced {mesh.vertex_count} vertices to {len(points)} hull vertices")
        except QhullError as e:
            # Flat or degenerate point sets have no 3D hull.
            logger.warning(f"Convex hull failed ({e.__class__.__name__}); using exact pairwise diameter")
    return _max_pairwise_distance(points)


def mesh_bounds(mesh):
    """Returns (min xyz, size xyz) of the axis-aligned bounding box."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    return lo, hi - lo


def bounding_sphere(mesh):
    """Sphere centred on the bounding-box centre that encloses every vertex."""
    lo, size = mesh_bounds(mesh)
    center = lo + 0.5 * size
    radius = float(np.linalg.norm(mesh.vertices - center, axis=1).max())
    return center, radius


# --- Sampling and normals ---


def sample_surface(mesh, count, seed):
    """
    Draws ``count`` points uniformly by area on the mesh surface.

    Triangles are chosen with probability proportional to their area; inside a
    triangle the point is uniform in barycentric coordinates. Each sample gets
    the unit face normal of its source triangle. The same seed always gives the
    same samples.

    Args:
        mesh (TriMesh): Mesh to sample.
        count (int): Number of samples, >= 1.
        seed (int): Seed for numpy's default generator.

    Returns:
        SurfaceSamples: with mean_spacing = sqrt(total_area / count).
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    areas = mesh.triangle_areas()
    total_area = float(areas.sum()) if areas.size else 0.0
    if not total_area > 0:
        raise DegenerateMeshError("mesh has zero total surface area")

    rng = np.random.default_rng(seed)
    tri_idx = rng.choice(len(areas), size=count, p=areas / total_area)
    u, v = rng.random((2, count))
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]

    v0, v1, v2 = mesh.triangle_corners()
    a, b, c = v0[tri_idx], v1[tri_idx], v2[tri_idx]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)

    face_normals = np.cross(v1 - v0, v2 - v0)
    face_normals /= (2.0 * np.where(areas > 0, areas, 1.0))[:, None]
    samples = SurfaceSamples(
        points=points,
        normals=face_normals[tri_idx],
        source_triangle=tri_idx,
        mean_spacing=np.sqrt(total_area / count),
    )
    logger.debug(f"Sampled {count} surface points, mean spacing {samples.mean_spacing:.4f} mm")
    return samples


def compute_vertex_normals(mesh):
    """Area-weighted vertex normals; isolated vertices get (0, 0, 1)."""
    v0, v1, v2 = mesh.triangle_corners()
    # Cross product length is twice the face area, so summing it weights by area.
    weighted = np.cross(v1 - v0, v2 - v0)
    accum = np.zeros_like(mesh.vertices)
    for corner in range(3):
        np.add.at(accum, mesh.triangles[:, corner], weighted)
    lengths = np.linalg.norm(accum, axis=1)
    normals = np.tile(np.array([0.0, 0.0, 1.0]), (mesh.vertex_count, 1))
    ok = lengths > 1e-300
    normals[ok] = accum[ok] / lengths[ok, None]
    return TriMesh(mesh.vertices, mesh.triangles, normals)
