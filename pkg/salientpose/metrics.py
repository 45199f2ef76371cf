# salientpose/metrics.py
"""Symmetry-aware 6D pose errors and BOP19-style recalls.

Errors: VSD (visible surface discrepancy), MSSD / MSPD (maximum symmetry-aware
surface / projection distance), ADD / ADI (average distance, plain and
nearest-neighbour), and the symmetry-aware rotation / translation errors.
Recalls count an error as correct when it is strictly below a threshold; AR is
the mean of the VSD, MSSD and MSPD recalls.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .config import Config
from .exceptions import BehindCameraError
from .file_utils import atomic_write
from .models import EvalConfig
from .raster import DepthMap, Pose, project, rasterize_depth

logger = logging.getLogger(__name__)

_IDENTITY_TOLERANCE = 1e-9
_DEDUP_TOLERANCE = 1e-6
_AXIS_TOLERANCE = 1e-9
# Pixel scale of the MSPD thresholds is defined at this image width.
_MSPD_REFERENCE_WIDTH = 640.0
AD_THRESHOLD = 0.1
RE_THRESHOLD_DEG = 10.0
TE_THRESHOLD_MM = 10.0

SUMMARY_COLUMNS = ["AR", "AD(0.1)", "MSPD", "MSSD", "reS(10)", "teS(10)", "VSD", "mean_re_deg", "mean_te_mm"]


# --- Symmetries ---


def _is_identity(transform):
    return (
        np.abs(transform.rotation - np.eye(3)).max() <= _IDENTITY_TOLERANCE
        and np.abs(transform.translation).max() <= _IDENTITY_TOLERANCE
    )


def rotation_angle(R_a, R_b):
    """Angle in radians between two rotations.

    Uses the chord ||R_a - R_b||_F = 2 sqrt(2) sin(theta / 2) for small angles,
    where arccos of the trace is ill-conditioned, and the trace elsewhere.
    """
    chord = np.linalg.norm(R_a - R_b) / (2.0 * math.sqrt(2.0))
    if chord < 0.7:
        return 2.0 * math.asin(chord)
    cos = (np.trace(R_a.T @ R_b) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos)))


@dataclass(frozen=True, eq=False)
class SymmetrySpec:
    """Discrete symmetry transforms (identity first) and continuous axes.

    ``continuous_axes`` holds (unit axis, offset point in mm) pairs: the object
    is invariant to any rotation about the line through ``offset`` along ``axis``.
    """

    discrete: Tuple[Pose, ...] = (Pose.identity(),)
    continuous_axes: Tuple[Tuple[np.ndarray, np.ndarray], ...] = ()

    def __post_init__(self):
        identities = sum(1 for s in self.discrete if _is_identity(s))
        if identities != 1:
            raise ValueError(f"discrete symmetries must contain identity exactly once, found {identities}")
        axes = []
        for axis, offset in self.continuous_axes:
            axis = np.asarray(axis, dtype=np.float64).reshape(3)
            if abs(np.linalg.norm(axis) - 1.0) > _AXIS_TOLERANCE:
                raise ValueError(f"continuous symmetry axis must have unit length, got {axis.tolist()}")
            axes.append((axis, np.asarray(offset, dtype=np.float64).reshape(3)))
        object.__setattr__(self, "discrete", tuple(self.discrete))
        object.__setattr__(self, "continuous_axes", tuple(axes))

    @classmethod
    def create(cls, discrete=(), continuous_axes=()):
        """Builds a spec from non-identity transforms; identity is added first."""
        others = [s for s in discrete if not _is_identity(s)]
        axes = []
        for axis, offset in continuous_axes:
            axis = np.asarray(axis, dtype=np.float64).reshape(3)
            axes.append((axis / np.linalg.norm(axis), offset))
        return cls((Pose.identity(), *others), tuple(axes))

    @property
    def is_symmetric(self):
        return len(self.discrete) > 1 or bool(self.continuous_axes)


def _dedup(transforms):
    rotations = np.stack([t.rotation for t in transforms])
    translations = np.stack([t.translation for t in transforms])
    kept = []
    for i in range(len(transforms)):
        if kept:
            chord = np.linalg.norm(rotations[kept] - rotations[i], axis=(1, 2)) / (2.0 * math.sqrt(2.0))
            angle = 2.0 * np.arcsin(np.minimum(chord, 1.0))
            shift = np.linalg.norm(translations[kept] - translations[i], axis=1)
            if np.any((angle <= _DEDUP_TOLERANCE) & (shift <= _DEDUP_TOLERANCE)):
                continue
        kept.append(i)
    return [transforms[i] for i in kept]


def expand_symmetries(spec, step_degrees=Config.SYMMETRY_STEP_DEG):
    """
    Lists every symmetry transform, continuous axes discretized.

    Each continuous axis contributes ceil(360 / step) rotations about its line;
    every such rotation is composed with every discrete transform and the result
    is deduplicated. Identity is always the first entry.
    """
    if not step_degrees > 0:
        raise ValueError(f"step_degrees must be > 0, got {step_degrees}")
    continuous = [Pose.identity()]
    for axis, offset in spec.continuous_axes:
        steps = int(math.ceil(360.0 / step_degrees))
        for i in range(1, steps):
            R = Rotation.from_rotvec(axis * (2.0 * math.pi * i / steps)).as_matrix()
            continuous.append(Pose(R, offset - R @ offset))
    combined = [c.compose(d) for c in continuous for d in spec.discrete]
    result = _dedup(combined)
    logger.debug(f"Expanded symmetries: {len(spec.discrete)} discrete, "
                 f"{len(spec.continuous_axes)} continuous -> {len(result)} transforms")
    return result


# --- Pose errors ---


def mssd(vertices, est, gt, syms):
    """Min over symmetries of the max vertex distance in 3D (mm)."""
    pts_est = est.apply(vertices)
    errors = [np.linalg.norm(pts_est - gt.compose(s).apply(vertices), axis=1).max() for s in syms]
    return float(min(errors))


def mspd(vertices, est, gt, syms, K):
    """
    Min over symmetries of the max vertex distance in the image (pixels).

    Raises:
        BehindCameraError: a vertex lies behind the camera under the ground-truth pose.
    """
    _, _, valid_gt = project(K, gt, vertices)
    if not valid_gt.all():
        raise BehindCameraError(f"{int((~valid_gt).sum())} vertices are behind the camera under the ground-truth pose")
    uv_est, _, valid_est = project(K, est, vertices)
    errors = []
    for s in syms:
        uv_gt, _, valid = project(K, gt.compose(s), vertices)
        ok = valid & valid_est
        dist = np.full(len(uv_gt), np.inf)
        dist[ok] = np.linalg.norm(uv_est[ok] - uv_gt[ok], axis=1)
        errors.append(dist.max())
    return float(min(errors))


def add_adi(vertices, est, gt):
    """
    Average vertex distance (ADD) and its nearest-neighbour variant (ADI), mm.

    ADI matches each estimated vertex to the closest ground-truth vertex, which
    is never farther than its own counterpart, so adi <= add.
    """
    pts_est = est.apply(vertices)
    pts_gt = gt.apply(vertices)
    direct = np.linalg.norm(pts_est - pts_gt, axis=1)
    nearest, _ = cKDTree(pts_gt).query(pts_est, k=1)
    return float(direct.mean()), float(np.minimum(nearest, direct).mean())


def re_te(est, gt, syms):
    """
    Symmetry-aware rotation error (degrees) and translation error (mm).

    For each symmetry S the ground truth becomes gt after S; the pair of the
    symmetry with the smallest rotation error is reported, ties going to the
    smaller translation error.
    """
    best = None
    for s in syms:
        target = gt.compose(s)
        re = math.degrees(rotation_angle(est.rotation, target.rotation))
        te = float(np.linalg.norm(est.translation - target.translation))
        if best is None or (re, te) < best:
            best = (re, te)
    return best


def _depth_array(depth):
    return depth.values if isinstance(depth, DepthMap) else np.asarray(depth, dtype=np.float64)


def visibility_masks(depth_est_render, depth_gt_render, depth_test, delta):
    """
    Visible footprints of the estimated and ground-truth renders.

    A rendered pixel is visible when it is not more than ``delta`` behind the
    test depth, or when the test depth has no measurement there.
    """
    est = _depth_array(depth_est_render)
    gt = _depth_array(depth_gt_render)
    test = _depth_array(depth_test)
    if not (est.shape == gt.shape == test.shape):
        raise ValueError(
            f"depth maps differ in size: est {est.shape}, gt {gt.shape}, test {test.shape}"
        )
    no_measurement = test == 0
    visib_est = (est > 0) & ((est - test <= delta) | no_measurement)
    visib_gt = (gt > 0) & ((gt - test <= delta) | no_measurement)
    return visib_est, visib_gt


def vsd_errors(depth_est_render, depth_gt_render, depth_test, taus, delta, annotated_visible=True):
    """VSD for several misalignment tolerances ``taus`` (mm) at once."""
    if not delta > 0 or any(not t > 0 for t in taus):
        raise ValueError(f"tau and delta must be > 0, got taus={list(taus)}, delta={delta}")
    visib_est, visib_gt = visibility_masks(depth_est_render, depth_gt_render, depth_test, delta)
    union = visib_est | visib_gt
    inter = visib_est & visib_gt
    union_count = int(union.sum())
    if union_count == 0:
        return [1.0 if annotated_visible else 0.0 for _ in taus]
    mismatch_count = union_count - int(inter.sum())
    diffs = np.abs(_depth_array(depth_est_render)[inter] - _depth_array(depth_gt_render)[inter])
    return [(mismatch_count + int((diffs > tau).sum())) / union_count for tau in taus]


def vsd(depth_est_render, depth_gt_render, depth_test, tau, delta, annotated_visible=True):
    """
    Visible Surface Discrepancy in [0, 1].

    Fraction of pixels in the union of both visible footprints that lie outside
    their intersection or whose rendered depths differ by more than ``tau``.
    An empty union counts as a full miss when the object is annotated visible.
    """
    return vsd_errors(depth_est_render, depth_gt_render, depth_test, [tau], delta, annotated_visible)[0]


# --- Reports ---


@dataclass(frozen=True, eq=False)
class PoseErrorReport:
    obj_id: int
    symmetric: bool
    vsd_errors: Tuple[float, ...]
    vsd_taus: Tuple[float, ...]
    mssd: float
    mspd: float
    add: float
    adi: float
    re: float
    te: float

    def __post_init__(self):
        if any(not 0.0 <= e <= 1.0 for e in self.vsd_errors):
            raise ValueError(f"vsd errors must lie in [0, 1], got {self.vsd_errors}")
        if len(self.vsd_errors) != len(self.vsd_taus):
            raise ValueError("one vsd error per tau is required")
        for name in ("mssd", "mspd", "add", "adi", "te"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.re <= 180.0 + 1e-9:
            raise ValueError(f"re must lie in [0, 180], got {self.re}")

    @property
    def ad(self):
        """ADI for symmetric objects, ADD otherwise."""
        return self.adi if self.symmetric else self.add


def evaluate_pose(mesh, est, gt, syms, K, diameter, cfg=None, depth_test=None, obj_id=0,
                  symmetric=None, annotated_visible=True):
    """
    Computes every pose error for one estimate against its ground truth.

    Args:
        mesh (TriMesh): Object model; its vertices feed the point-based errors.
        est (Pose): Estimated model-to-camera pose.
        gt (Pose): Ground-truth model-to-camera pose.
        syms (list[Pose]): Expanded symmetry transforms (identity included).
        K (CameraIntrinsics): Camera used for MSPD and the VSD renders.
        diameter (float): Object diameter in mm; VSD taus are fractions of it.
        cfg (EvalConfig | None): Evaluation settings.
        depth_test (DepthMap | None): Scene depth; defaults to the ground-truth render.
        obj_id (int): Object id recorded in the report.
        symmetric (bool | None): Overrides the symmetric flag (default: len(syms) > 1).
        annotated_visible (bool): VSD value for an empty footprint union.

    Returns:
        PoseErrorReport
    """
    cfg = cfg or EvalConfig()
    vertices = mesh.vertices
    depth_est = rasterize_depth(mesh, est, K)
    depth_gt = rasterize_depth(mesh, gt, K)
    taus = [f * diameter for f in cfg.vsd_tau_fractions]
    errors = vsd_errors(
        depth_est, depth_gt, depth_test if depth_test is not None else depth_gt,
        taus, cfg.vsd_delta, annotated_visible,
    )
    add, adi = add_adi(vertices, est, gt)
    re, te = re_te(est, gt, syms)
    return PoseErrorReport(
        obj_id=int(obj_id),
        symmetric=len(syms) > 1 if symmetric is None else bool(symmetric),
        vsd_errors=tuple(errors),
        vsd_taus=tuple(taus),
        mssd=mssd(vertices, est, gt, syms),
        mspd=mspd(vertices, est, gt, syms, K),
        add=add,
        adi=adi,
        re=re,
        te=te,
    )


# --- Recalls ---


def average_recall(ar_vsd, ar_mssd, ar_mspd):
    """AR = mean of the three component recalls (exactly rounded sum)."""
    return math.fsum([ar_vsd, ar_mssd, ar_mspd]) / 3.0


def _ratio(hits, total):
    return hits / total if total else None


def _mean(values):
    return math.fsum(values) / len(values) if values else None


@dataclass(frozen=True, eq=False)
class MetricSummary:
    """
    Hit counts over the BOP19 grids for a group of targets.

    Every ground-truth target contributes one slot per grid cell; targets
    without a matched estimate contribute only misses. Counts are integers so
    summaries of disjoint groups merge exactly.
    """

    targets: int = 0
    estimates: int = 0
    vsd_cells: int = 0
    mssd_cells: int = 0
    mspd_cells: int = 0
    vsd_hits: int = 0
    mssd_hits: int = 0
    mspd_hits: int = 0
    ad_hits: int = 0
    re_hits: int = 0
    te_hits: int = 0
    re_values: Tuple[float, ...] = field(default_factory=tuple)
    te_values: Tuple[float, ...] = field(default_factory=tuple)

    @property
    def ar_vsd(self):
        return _ratio(self.vsd_hits, self.targets * self.vsd_cells)

    @property
    def ar_mssd(self):
        return _ratio(self.mssd_hits, self.targets * self.mssd_cells)

    @property
    def ar_mspd(self):
        return _ratio(self.mspd_hits, self.targets * self.mspd_cells)

    @property
    def ar(self):
        parts = (self.ar_vsd, self.ar_mssd, self.ar_mspd)
        return None if any(p is None for p in parts) else average_recall(*parts)

    @property
    def ad_recall(self):
        return _ratio(self.ad_hits, self.targets)

    @property
    def re_recall(self):
        return _ratio(self.re_hits, self.targets)

    @property
    def te_recall(self):
        return _ratio(self.te_hits, self.targets)

    @property
    def mean_re(self):
        return _mean(self.re_values)

    @property
    def mean_te(self):
        return _mean(self.te_values)

    def as_row(self):
        """Summary columns in table order, then the raw means and counts."""
        return {
            "AR": self.ar,
            "AD(0.1)": self.ad_recall,
            "MSPD": self.ar_mspd,
            "MSSD": self.ar_mssd,
            "reS(10)": self.re_recall,
            "teS(10)": self.te_recall,
            "VSD": self.ar_vsd,
            "mean_re_deg": self.mean_re,
            "mean_te_mm": self.mean_te,
            "targets": self.targets,
            "estimates": self.estimates,
        }


def _grid_cells(cfg, vsd_taus):
    return len(cfg.vsd_thresholds) * vsd_taus, len(cfg.mssd_thresholds), len(cfg.mspd_thresholds)


def summarize_reports(reports, diameter, image_width, cfg=None, targets=None):
    """
    Counts grid hits for reports of one object.

    Args:
        reports (list[PoseErrorReport]): One report per matched estimate.
        diameter (float): Object diameter in mm, > 0.
        image_width (int): Image width in pixels (MSPD thresholds scale with it).
        cfg (EvalConfig | None): Threshold grids.
        targets (int | None): Ground-truth instances; defaults to len(reports).

    Returns:
        MetricSummary
    """
    cfg = cfg or EvalConfig()
    if not diameter > 0:
        raise ValueError(f"diameter must be > 0, got {diameter}")
    targets = len(reports) if targets is None else targets
    if targets < len(reports):
        raise ValueError(f"{len(reports)} reports exceed {targets} targets")
    vsd_taus = len(cfg.vsd_tau_fractions)
    vsd_cells, mssd_cells, mspd_cells = _grid_cells(cfg, vsd_taus)
    pixel_scale = image_width / _MSPD_REFERENCE_WIDTH

    vsd_hits = mssd_hits = mspd_hits = ad_hits = re_hits = te_hits = 0
    for report in reports:
        if len(report.vsd_errors) != vsd_taus:
            raise ValueError(f"report has {len(report.vsd_errors)} VSD errors, grid expects {vsd_taus}")
        vsd_hits += sum(e < th for e in report.vsd_errors for th in cfg.vsd_thresholds)
        mssd_hits += sum(report.mssd < th * diameter for th in cfg.mssd_thresholds)
        mspd_hits += sum(report.mspd < th * pixel_scale for th in cfg.mspd_thresholds)
        ad_hits += report.ad < AD_THRESHOLD * diameter
        re_hits += report.re < RE_THRESHOLD_DEG
        te_hits += report.te < TE_THRESHOLD_MM
    return MetricSummary(
        targets=targets,
        estimates=len(reports),
        vsd_cells=vsd_cells,
        mssd_cells=mssd_cells,
        mspd_cells=mspd_cells,
        vsd_hits=int(vsd_hits),
        mssd_hits=int(mssd_hits),
        mspd_hits=int(mspd_hits),
        ad_hits=int(ad_hits),
        re_hits=int(re_hits),
        te_hits=int(te_hits),
        re_values=tuple(r.re for r in reports),
        te_values=tuple(r.te for r in reports),
    )


def recall_and_ar(reports, diameter, image_width, cfg=None):
    """
    Recalls over the BOP19 grids and their average recall for one object.

    VSD: error < theta for theta in 0.05..0.50, at every tau in 0.05d..0.50d.
    MSSD: error < theta * d for theta in 0.05..0.50.
    MSPD: error < theta * image_width / 640 for theta in 5..50 px.
    Also AD(0.1) and recall at re < 10 deg and te < 10 mm.
    """
    if not reports:
        raise ValueError("recall_and_ar needs at least one report")
    return summarize_reports(reports, diameter, image_width, cfg)


def merge_summaries(summaries):
    """Adds up summaries of disjoint target groups."""
    summaries = [s for s in summaries if s.targets]
    if not summaries:
        return MetricSummary()
    cells = {(s.vsd_cells, s.mssd_cells, s.mspd_cells) for s in summaries}
    if len(cells) > 1:
        raise ValueError(f"cannot merge summaries computed on different grids: {sorted(cells)}")
    vsd_cells, mssd_cells, mspd_cells = cells.pop()
    return MetricSummary(
        targets=sum(s.targets for s in summaries),
        estimates=sum(s.estimates for s in summaries),
        vsd_cells=vsd_cells,
        mssd_cells=mssd_cells,
        mspd_cells=mspd_cells,
        vsd_hits=sum(s.vsd_hits for s in summaries),
        mssd_hits=sum(s.mssd_hits for s in summaries),
        mspd_hits=sum(s.mspd_hits for s in summaries),
        ad_hits=sum(s.ad_hits for s in summaries),
        re_hits=sum(s.re_hits for s in summaries),
        te_hits=sum(s.te_hits for s in summaries),
        re_values=tuple(v for s in summaries for v in s.re_values),
        te_values=tuple(v for s in summaries for v in s.te_values),
    )


# --- Output ---


def _csv_cell(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_summary_csv(path, summaries):
    """One row per group: group, then the table columns, then counts."""
    header = ["group"] + SUMMARY_COLUMNS + ["targets", "estimates"]
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for name, summary in summaries.items():
            row = summary.as_row()
            writer.writerow([name] + [_csv_cell(row[c]) for c in header[1:]])
    logger.info(f"Wrote summary table with {len(summaries)} rows to {path}")
