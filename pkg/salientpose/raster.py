# salientpose/raster.py
"""Pinhole projection, z-buffer depth rasterization and visibility tests.

Camera frame follows the OpenCV / BOP convention: x right, y down, z forward.
Depth is the camera-frame z in mm, 0 where no surface was rasterized.
"""

import logging
import math
import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import Config
from .file_utils import atomic_write

logger = logging.getLogger(__name__)

_ROTATION_TOLERANCE = 1e-6
_BEHIND_CAMERA_Z = 1e-9


# --- Camera and pose ---


@dataclass(frozen=True, eq=False)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K, width, height):
        K = np.asarray(K, dtype=np.float64).reshape(3, 3)
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2], width, height)

    def scaled(self, factor):
        """Intrinsics for the same view at ``factor`` times the resolution."""
        return CameraIntrinsics(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            int(round(self.width * factor)),
            int(round(self.height * factor)),
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid model-to-camera transform x -> R x + t (translation in mm)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        deviation = np.abs(R.T @ R - np.eye(3)).max()
        if deviation > _ROTATION_TOLERANCE or abs(np.linalg.det(R) - 1.0) > _ROTATION_TOLERANCE:
            raise ValueError(
                f"rotation must be orthonormal with det +1 (deviation {deviation:.3g})"
            )
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def compose(self, other):
        """Returns self after other: x -> R1 (R2 x + t2) + t1."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return points @ self.rotation.T + self.translation


def nearest_rotation(M):
    """Projects a 3x3 matrix onto SO(3) (closest rotation in Frobenius norm)."""
    M = np.asarray(M, dtype=np.float64).reshape(3, 3)
    U, _, Vt = np.linalg.svd(M)
    if np.linalg.det(U @ Vt) < 0:
        U[:, -1] *= -1.0
    return U @ Vt


# --- Depth maps ---


@dataclass(frozen=True, eq=False)
class DepthMap:
    """Depth image, ``values`` indexed [row, column] = [v, u]."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValueError(f"depth values must be a nonempty 2D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or values.min() < 0:
            raise ValueError("depth values must be finite and >= 0")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    @classmethod
    def empty(cls, width, height):
        return cls(np.zeros((height, width)))


def default_visibility_eps(diameter):
    return max(Config.MIN_VISIBILITY_EPS_MM, Config.VISIBILITY_EPS_DIAMETER_FRACTION * diameter)


# --- Projection ---


def project(K, pose, points):
    """
    Projects model points through a pose and pinhole intrinsics.

    Args:
        K (CameraIntrinsics): Camera intrinsics.
        pose (Pose): Model-to-camera transform.
        points: (N, 3) model points in mm.

    Returns:
        tuple: (uv (N, 2) pixels, z (N,) camera depth in mm, valid (N,) bool).
        Points with z <= 1e-9 mm are flagged invalid and get NaN pixel coordinates.
    """
    cam = pose.apply(points)
    z = cam[:, 2]
    valid = z > _BEHIND_CAMERA_Z
    uv = np.full((len(cam), 2), np.nan)
    uv[valid, 0] = K.fx * cam[valid, 0] / z[valid] + K.cx
    uv[valid, 1] = K.fy * cam[valid, 1] / z[valid] + K.cy
    return uv, z, valid


# --- Rasterization ---


def _clip_near(polygon, near):
    """Sutherland-Hodgman clip of a camera-frame polygon against z >= near."""
    out = []
    count = len(polygon)
    for i in range(count):
        cur = polygon[i]
        nxt = polygon[(i + 1) % count]
        cur_in = cur[2] >= near
        nxt_in = nxt[2] >= near
        if cur_in:
            out.append(cur)
        if cur_in != nxt_in:
            s = (near - cur[2]) / (nxt[2] - cur[2])
            point = cur + s * (nxt - cur)
            point[2] = near
            out.append(point)
    return out


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def _is_top_left(ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    return dy < 0 or (dy == 0 and dx > 0)


def _raster_triangle(depth, owner, item, tri, K):
    z = tri[:, 2]
    x = K.fx * tri[:, 0] / z + K.cx
    y = K.fy * tri[:, 1] / z + K.cy
    area = _edge(x[0], y[0], x[1], y[1], x[2], y[2])
    if not math.isfinite(area) or area == 0.0:
        return
    if area < 0:
        x, y, z = x[[0, 2, 1]], y[[0, 2, 1]], z[[0, 2, 1]]
        area = -area

    height, width = depth.shape
    i0 = max(0, int(math.floor(x.min())))
    i1 = min(width - 1, int(math.ceil(x.max())))
    j0 = max(0, int(math.floor(y.min())))
    j1 = min(height - 1, int(math.ceil(y.max())))
    if i0 > i1 or j0 > j1:
        return

    px, py = np.meshgrid(np.arange(i0, i1 + 1) + 0.5, np.arange(j0, j1 + 1) + 0.5)
    inside = np.ones(px.shape, dtype=bool)
    weights = []
    for a, b in ((1, 2), (2, 0), (0, 1)):
        w = _edge(x[a], y[a], x[b], y[b], px, py)
        if _is_top_left(x[a], y[a], x[b], y[b]):
            inside &= w >= 0
        else:
            inside &= w > 0
        weights.append(w)
    if not inside.any():
        return

    if z[0] == z[1] == z[2]:
        z_pix = np.full(px.shape, z[0])
    else:
        # 1/z is affine in screen space.
        inv_z = (weights[0] / z[0] + weights[1] / z[1] + weights[2] / z[2]) / area
        with np.errstate(divide="ignore"):
            z_pix = np.clip(1.0 / inv_z, z.min(), z.max())

    window = depth[j0:j1 + 1, i0:i1 + 1]
    closer = inside & (z_pix < window)
    window[closer] = z_pix[closer]
    owner[j0:j1 + 1, i0:i1 + 1][closer] = item


def rasterize_scene(items, K, near=Config.NEAR_PLANE_MM):
    """
    Rasterizes several posed meshes into one shared z-buffer.

    Pixel (i, j) is sampled at (i + 0.5, j + 0.5); edge ties follow the top-left
    rule so pixels on a shared edge are covered once. Triangles crossing the
    near plane are clipped against it. There is no back-face culling.

    Args:
        items: Sequence of (TriMesh, Pose) pairs.
        K (CameraIntrinsics): Camera intrinsics.
        near (float): Near plane in mm.

    Returns:
        tuple: (DepthMap, owner) where owner[v, u] is the index of the item
        nearest at that pixel, or -1 for background.
    """
    zbuf = np.full((K.height, K.width), np.inf)
    owner = np.full((K.height, K.width), -1, dtype=np.int64)
    for item, (mesh, pose) in enumerate(items):
        cam = pose.apply(mesh.vertices)
        tris = cam[mesh.triangles]
        z = tris[:, :, 2]
        front = (z >= near).all(axis=1)
        crossing = ~front & (z >= near).any(axis=1)
        for tri in tris[front]:
            _raster_triangle(zbuf, owner, item, tri, K)
        for tri in tris[crossing]:
            polygon = _clip_near([p.copy() for p in tri], near)
            for k in range(1, len(polygon) - 1):
                _raster_triangle(zbuf, owner, item, np.array([polygon[0], polygon[k], polygon[k + 1]]), K)
        logger.debug(
            f"Rasterized item {item}: {int(front.sum())} triangles, {int(crossing.sum())} clipped"
        )
    zbuf[~np.isfinite(zbuf)] = 0.0
    return DepthMap(zbuf), owner


def rasterize_depth(mesh, pose, K, near=Config.NEAR_PLANE_MM):
    """Nearest-surface depth of one posed mesh (0 where uncovered)."""
    depth, _ = rasterize_scene([(mesh, pose)], K, near=near)
    return depth


# --- Visibility ---


def visible_mask(samples, pose, K, depth, eps):
    """
    Flags surface samples seen by the camera.

    A sample is visible when it projects inside the image in front of the
    camera, its depth is within ``eps`` of the z-buffer at its pixel, and its
    normal faces the camera. Pass a depth map rasterized from every scene mesh
    to account for occlusion by other objects.
    """
    if not eps > 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    if depth.width != K.width or depth.height != K.height:
        raise ValueError(
            f"depth map is {depth.width}x{depth.height} but camera is {K.width}x{K.height}"
        )
    uv, z, valid = project(K, pose, samples.points)
    u = np.where(valid, uv[:, 0], -1.0)
    v = np.where(valid, uv[:, 1], -1.0)
    inside = valid & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)

    mask = np.zeros(len(samples), dtype=bool)
    rows = np.floor(v[inside]).astype(np.int64)
    cols = np.floor(u[inside]).astype(np.int64)
    surface = depth.values[rows, cols]
    unoccluded = (surface > 0) & (z[inside] <= surface + eps)

    cam_points = pose.apply(samples.points[inside])
    cam_normals = samples.normals[inside] @ pose.rotation.T
    facing = np.einsum("ij,ij->i", cam_normals, cam_points) < 0
    mask[np.nonzero(inside)[0]] = unoccluded & facing
    logger.debug(f"Visibility: {int(mask.sum())}/{len(samples)} samples visible (eps={eps} mm)")
    return mask


# --- Serialization ---


def write_depth_png(path, depth, depth_scale=Config.DEPTH_SCALE):
    """Writes depth as a 16-bit PNG holding round(depth / depth_scale)."""
    if not depth_scale > 0:
        raise ValueError(f"depth_scale must be > 0, got {depth_scale}")
    units = np.round(depth.values / depth_scale)
    if units.max() > np.iinfo(np.uint16).max:
        raise ValueError(
            f"depth {depth.values.max():.1f} mm does not fit 16 bits at scale {depth_scale} mm/unit"
        )
    image = Image.fromarray(units.astype(np.uint16))
    with atomic_write(path, "wb") as fh:
        image.save(fh, format="PNG")


def read_depth_png(path, depth_scale=Config.DEPTH_SCALE):
    with Image.open(path) as image:
        units = np.array(image)
    return DepthMap(units.astype(np.float64) * depth_scale)


def write_raw(path, values):
    """Writes a 2D float image: uint32 width, uint32 height, then float32 LE rows."""
    values = np.asarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"raw images must be 2D, got shape {values.shape}")
    height, width = values.shape
    with atomic_write(path, "wb") as fh:
        fh.write(struct.pack("<II", width, height))
        fh.write(values.tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) != 8:
            raise ValueError(f"{path}: raw image header is truncated")
        width, height = struct.unpack("<II", header)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != width * height:
        raise ValueError(f"{path}: expected {width * height} values, found {data.size}")
    return data.reshape(height, width).astype(np.float64)
