# salientpose/keypoints.py
"""Density-weighted 3D Harris saliency, keypoint selection and heatmap encoding.

For a surface sample p with neighbourhood N(p), the local covariance
C_p = mean((x - p)(x - p)^T) has eigenvalues l1 >= l2 >= l3. The saliency is
S = rho * l1 / (l1 + l2 + l3), where rho is the normalised local point density.
Samples with S above a threshold become keypoints, which are projected into the
image and splatted as Gaussians into a heatmap with values in [0, 1].
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .exceptions import InputParseError, InsufficientSamplesError
from .file_utils import atomic_write, read_json, write_json
from .geometry import mesh_diameter, sample_surface
from .raster import default_visibility_eps, project, rasterize_depth, visible_mask

logger = logging.getLogger(__name__)

_SYMMETRY_TOLERANCE = 1e-9
# Closed-form eigenvalues lose accuracy next to a repeated root; |r| beyond this
# goes through the iterative solver instead.
_REPEATED_ROOT_MARGIN = 1e-6
_HEATMAP_SUPPORT_SIGMAS = 3.0
_PNG_MAX = 65535


# --- Domain types ---


@dataclass(frozen=True, eq=False)
class SaliencySample:
    point: np.ndarray
    eigenvalues: tuple
    density: float
    saliency: float
    index: int


@dataclass(frozen=True, eq=False)
class SaliencyField:
    """Saliency of every visible sample, stored column-wise.

    ``indices`` are positions in the source SurfaceSamples; entry i of every
    other array belongs to sample ``indices[i]``.
    """

    indices: np.ndarray
    points: np.ndarray
    eigenvalues: np.ndarray
    density: np.ndarray
    saliency: np.ndarray

    def __len__(self):
        return len(self.indices)

    def __getitem__(self, i):
        return SaliencySample(
            point=self.points[i],
            eigenvalues=tuple(float(v) for v in self.eigenvalues[i]),
            density=float(self.density[i]),
            saliency=float(self.saliency[i]),
            index=int(self.indices[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Keypoints in model coordinates (mm) with saliency weights in (0, 1]."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        weights = np.array(self.weights, dtype=np.float64).reshape(-1)
        if len(points) != len(weights):
            raise ValueError(f"{len(points)} keypoints but {len(weights)} weights")
        if weights.size and (weights.min() <= 0 or weights.max() > 1):
            raise ValueError("keypoint weights must lie in (0, 1]")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros(0))


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Heatmap image, ``values`` indexed [row, column], all in [0, 1]."""

    values: np.ndarray
    sigma: float

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class KeypointExtraction:
    samples: object
    visible: np.ndarray
    field: SaliencyField
    keypoints: KeypointSet
    density_radius: float
    tau: float


# --- Local geometry ---


def covariance(p, neighbors):
    """C_p = (1/n) sum (x_i - p)(x_i - p)^T over the neighbour list."""
    neighbors = np.asarray(neighbors, dtype=np.float64).reshape(-1, 3)
    if len(neighbors) == 0:
        raise ValueError("covariance needs at least one neighbour")
    d = neighbors - np.asarray(p, dtype=np.float64).reshape(1, 3)
    return d.T @ d / len(d)


def eigen3_sym_batch(C):
    """
    Eigenvalues of a stack of symmetric 3x3 matrices, descending.

    Uses the trigonometric solution of the characteristic polynomial. Matrices
    close to a repeated eigenvalue (where the arccos is ill-conditioned) are
    solved with LAPACK's symmetric eigensolver instead.

    Args:
        C: (N, 3, 3) array of symmetric matrices.

    Returns:
        np.ndarray: (N, 3) eigenvalues, each row descending.
    """
    C = np.asarray(C, dtype=np.float64).reshape(-1, 3, 3)
    asym = np.abs(C - C.transpose(0, 2, 1)).max() if len(C) else 0.0
    if asym > _SYMMETRY_TOLERANCE:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3g})")

    q = np.trace(C, axis1=1, axis2=2) / 3.0
    p1 = C[:, 0, 1] ** 2 + C[:, 0, 2] ** 2 + C[:, 1, 2] ** 2
    diag = np.diagonal(C, axis1=1, axis2=2) - q[:, None]
    p = np.sqrt((np.sum(diag ** 2, axis=1) + 2.0 * p1) / 6.0)

    out = np.repeat(q[:, None], 3, axis=1)
    spread = p > 0
    if spread.any():
        ps = p[spread]
        B = (C[spread] - q[spread, None, None] * np.eye(3)) / ps[:, None, None]
        r = np.linalg.det(B) / 2.0
        phi = np.arccos(np.clip(r, -1.0, 1.0)) / 3.0
        l1 = q[spread] + 2.0 * ps * np.cos(phi)
        l3 = q[spread] + 2.0 * ps * np.cos(phi + 2.0 * np.pi / 3.0)
        l2 = 3.0 * q[spread] - l1 - l3
        out[spread] = np.stack([l1, l2, l3], axis=1)

        fallback = np.nonzero(spread)[0][np.abs(r) > 1.0 - _REPEATED_ROOT_MARGIN]
        if fallback.size:
            out[fallback] = np.linalg.eigvalsh(C[fallback])[:, ::-1]
    return out


def eigen3_sym(C):
    """Eigenvalues (l1, l2, l3) of one symmetric 3x3 matrix, descending."""
    l1, l2, l3 = eigen3_sym_batch(np.asarray(C, dtype=np.float64).reshape(1, 3, 3))[0]
    return float(l1), float(l2), float(l3)


def local_density(points, radius):
    """
    Normalised neighbour count within ``radius`` (mm), self included.

    Returns rho_i = c_i / max_j c_j, so every value is in (0, 1].
    """
    if not radius > 0:
        raise ValueError(f"radius must be > 0, got {radius}")
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("local_density needs at least one point")
    counts = cKDTree(points).query_ball_point(points, r=radius, return_length=True)
    counts = np.asarray(counts, dtype=np.float64)
    return counts / counts.max()


# --- Saliency ---


def _knn_without_self(tree, points, k):
    _, nn = tree.query(points, k=k + 1)
    own = nn == np.arange(len(points))[:, None]
    keep = ~own
    # Duplicate points can push a sample out of its own k+1 list.
    keep[~own.any(axis=1), -1] = False
    return nn[keep].reshape(len(points), k)


def saliency_field(samples, visible, cfg, use_density=True):
    """
    Density-weighted Harris saliency over the visible samples.

    Neighbours are the ``cfg.k`` nearest visible samples (exact kd-tree search).
    With ``use_density=False`` the density weight is left out and S is the plain
    ratio l1 / (l1 + l2 + l3).

    Raises:
        InsufficientSamplesError: fewer than k + 1 visible samples.
    """
    visible = np.asarray(visible, dtype=bool)
    if visible.shape != (len(samples),):
        raise ValueError(f"visible mask has shape {visible.shape}, expected ({len(samples)},)")
    indices = np.nonzero(visible)[0]
    if len(indices) < cfg.k + 1:
        raise InsufficientSamplesError(
            f"{len(indices)} visible samples, need at least k + 1 = {cfg.k + 1}"
        )
    points = samples.points[indices]
    tree = cKDTree(points)
    neighbors = _knn_without_self(tree, points, cfg.k)

    offsets = points[neighbors] - points[:, None, :]
    C = np.einsum("nki,nkj->nij", offsets, offsets) / cfg.k
    # Force exact symmetry before the solver's check.
    C = 0.5 * (C + C.transpose(0, 2, 1))
    eigenvalues = np.clip(eigen3_sym_batch(C), 0.0, None)

    total = eigenvalues.sum(axis=1)
    ratio = np.zeros(len(points))
    positive = total > 0
    ratio[positive] = eigenvalues[positive, 0] / total[positive]

    if use_density:
        density = local_density(points, cfg.density_radius)
    else:
        density = np.ones(len(points))
    field = SaliencyField(
        indices=indices,
        points=points,
        eigenvalues=eigenvalues,
        density=density,
        saliency=density * ratio,
    )
    logger.debug(
        f"Saliency over {len(field)} samples (k={cfg.k}, radius={cfg.density_radius:.3f} mm, "
        f"density={'on' if use_density else 'off'}), max S={field.saliency.max():.4f}"
    )
    return field


def select_keypoints(field, tau, nms_radius, max_count=None):
    """
    Picks samples with S > tau, strongest first, with greedy suppression.

    A candidate closer than ``nms_radius`` to an already kept keypoint is
    dropped. Equal saliencies are visited in ascending field order. Weights are
    S / S_max over the kept set.

    Args:
        field (SaliencyField): Output of saliency_field.
        tau (float): Threshold, >= 0.
        nms_radius (float): Suppression radius in mm, 0 disables suppression.
        max_count (int | None): Maximum number of keypoints, None for no limit.

    Returns:
        KeypointSet: possibly empty.
    """
    if tau < 0 or nms_radius < 0:
        raise ValueError(f"tau and nms_radius must be >= 0, got {tau}, {nms_radius}")
    if max_count is not None and not max_count >= 1:
        raise ValueError(f"max_count must be >= 1, got {max_count}")

    saliency = np.asarray(field.saliency)
    candidates = np.nonzero(saliency > tau)[0]
    if candidates.size == 0:
        return KeypointSet.empty()
    order = candidates[np.lexsort((candidates, -saliency[candidates]))]
    cand_points = field.points[order]
    tree = cKDTree(cand_points) if nms_radius > 0 else None

    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    limit = math.inf if max_count is None else max_count
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        kept.append(rank)
        if len(kept) >= limit:
            break
        if tree is not None:
            near = np.asarray(tree.query_ball_point(cand_points[rank], r=nms_radius), dtype=np.int64)
            dist = np.linalg.norm(cand_points[near] - cand_points[rank], axis=1)
            suppressed[near[dist < nms_radius]] = True

    kept = np.asarray(kept)
    scores = saliency[order[kept]]
    return KeypointSet(cand_points[kept], scores / scores.max())


def extract_keypoints(mesh, params, camera=None, pose=None, scene_depth=None):
    """
    Full keypoint chain: sample, optionally filter by visibility, score, select.

    Visibility filtering runs when both ``camera`` and ``pose`` are given. The
    depth reference is ``scene_depth`` when passed (all scene meshes, so other
    objects occlude), otherwise the mesh rendered alone.

    Args:
        mesh (TriMesh): Object model in mm.
        params (KeypointParams): Sampling, neighbourhood and selection settings.
        camera (CameraIntrinsics | None): Intrinsics for visibility filtering.
        pose (Pose | None): Model-to-camera pose for visibility filtering.
        scene_depth (DepthMap | None): Precomputed depth of the whole scene.

    Returns:
        KeypointExtraction: samples, visibility mask, field and keypoints.
    """
    samples = sample_surface(mesh, params.samples, params.seed)
    if (camera is None) != (pose is None):
        raise ValueError("camera and pose must be given together")
    if camera is not None:
        depth = scene_depth if scene_depth is not None else rasterize_depth(mesh, pose, camera)
        eps = params.visibility_eps or default_visibility_eps(mesh_diameter(mesh))
        visible = visible_mask(samples, pose, camera, depth, eps)
    else:
        visible = np.ones(len(samples), dtype=bool)

    neighborhood = params.neighborhood(samples.mean_spacing)
    field = saliency_field(samples, visible, neighborhood, use_density=params.use_density)
    tau = params.tau if params.tau is not None else params.tau_rel * float(field.saliency.max())
    nms_radius = params.nms_radius if params.nms_radius is not None else neighborhood.density_radius
    keypoints = select_keypoints(field, tau, nms_radius, params.max_keypoints)
    logger.info(
        f"Selected {len(keypoints)} keypoints from {len(field)}/{len(samples)} visible samples "
        f"(tau={tau:.4f}, nms={nms_radius:.3f} mm)"
    )
    return KeypointExtraction(samples, visible, field, keypoints, neighborhood.density_radius, tau)


# --- Heatmaps ---


def render_heatmap(kps, pose, K, width, height, sigma, combine="max"):
    """
    Splats projected keypoints as truncated Gaussians into a heatmap.

    Each keypoint adds w * exp(-d^2 / (2 sigma^2)) to pixels whose centre
    (i + 0.5, j + 0.5) is within 3 sigma of its projection. ``combine='max'``
    keeps the per-pixel maximum, so a peak equals its weight; ``'sum'`` adds
    contributions and clamps to 1. Keypoints off the image or behind the camera
    are skipped.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if combine not in ("max", "sum"):
        raise ValueError(f"combine must be 'max' or 'sum', got {combine!r}")
    values = np.zeros((height, width))
    if len(kps) == 0:
        return Heatmap(values, float(sigma))

    uv, _, valid = project(K, pose, kps.points)
    reach = _HEATMAP_SUPPORT_SIGMAS * sigma
    drawn = 0
    for (u, v), ok, w in zip(uv, valid, kps.weights):
        if not ok or not (0 <= u < width and 0 <= v < height):
            continue
        i0 = max(0, int(math.ceil(u - 0.5 - reach)))
        i1 = min(width - 1, int(math.floor(u - 0.5 + reach)))
        j0 = max(0, int(math.ceil(v - 0.5 - reach)))
        j1 = min(height - 1, int(math.floor(v - 0.5 + reach)))
        dx = np.arange(i0, i1 + 1) + 0.5 - u
        dy = np.arange(j0, j1 + 1) + 0.5 - v
        d2 = dy[:, None] ** 2 + dx[None, :] ** 2
        g = np.where(d2 <= reach ** 2, w * np.exp(-d2 / (2.0 * sigma ** 2)), 0.0)
        window = values[j0:j1 + 1, i0:i1 + 1]
        if combine == "max":
            np.maximum(window, g, out=window)
        else:
            window += g
        drawn += 1
    if combine == "sum":
        np.clip(values, 0.0, 1.0, out=values)
    logger.debug(f"Heatmap {width}x{height}: drew {drawn}/{len(kps)} keypoints, sigma={sigma}")
    return Heatmap(values, float(sigma))


# --- Serialization ---


def write_keypoints_json(path, kps):
    write_json(path, {"points": kps.points.tolist(), "weights": kps.weights.tolist()})


def read_keypoints_json(path):
    data = read_json(path)
    if not isinstance(data, dict) or "points" not in data or "weights" not in data:
        raise InputParseError(f"{path}: keypoint file needs 'points' and 'weights'")
    try:
        points = np.asarray(data["points"], dtype=np.float64).reshape(-1, 3)
        weights = np.asarray(data["weights"], dtype=np.float64).reshape(-1)
        return KeypointSet(points, weights)
    except (TypeError, ValueError) as e:
        raise InputParseError(f"{path}: invalid keypoint data ({e})")


def write_heatmap_png(path, heatmap):
    """Writes round(v * 65535) as a 16-bit grayscale PNG."""
    units = np.round(np.clip(heatmap.values, 0.0, 1.0) * _PNG_MAX).astype(np.uint16)
    with atomic_write(path, "wb") as fh:
        Image.fromarray(units).save(fh, format="PNG")


def read_heatmap_png(path, sigma=float("nan")):
    with Image.open(path) as image:
        units = np.array(image)
    return Heatmap(units.astype(np.float64) / _PNG_MAX, sigma)
