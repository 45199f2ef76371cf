# salientpose/bopio.py
"""BOP dataset files and dataset-level evaluation.

Layout understood here::

    <root>/camera.json
    <root>/models/obj_000001.ply, models_info.json
    <root>/scene_000001/ (or 000001/)
        scene_gt.json, scene_camera.json, scene_gt_info.json,
        depth/000000.png, mask_visib/000000_000000.png

Image ids are JSON object keys (strings); they are written in numeric order.
Rotations are 9 floats row-major, translations 3 floats in mm.
"""

import csv
import enum
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment
from tqdm import tqdm

from .config import Config
from .exceptions import BopFormatError, MissingModelError, ResultsFormatError, UnknownReferenceError
from .file_utils import atomic_write, read_json, write_json
from .geometry import load_mesh, mesh_bounds, mesh_diameter
from .metrics import (
    SymmetrySpec,
    evaluate_pose,
    expand_symmetries,
    merge_summaries,
    mssd,
    summarize_reports,
)
from .models import EvalConfig
from .raster import CameraIntrinsics, Pose, nearest_rotation, read_depth_png

logger = logging.getLogger(__name__)

# Stored rotations carry limited precision; beyond this they are rejected.
ROTATION_FILE_TOLERANCE = 1e-4
# Below this deviation a rotation is kept bit-for-bit.
_REORTHONORMALIZE_ABOVE = 1e-12
RESULTS_HEADER = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"]


class Category(str, enum.Enum):
    CAN = "Can"
    HOUSEHOLD = "Household"
    INDUSTRY = "Industry"


# --- Records ---


@dataclass(frozen=True, eq=False)
class SceneGtEntry:
    obj_id: int
    rotation: np.ndarray
    translation: np.ndarray

    @property
    def pose(self):
        return Pose(self.rotation, self.translation)


@dataclass(frozen=True, eq=False)
class SceneCamera:
    cam_K: np.ndarray
    depth_scale: float = 1.0
    cam_R_w2c: Optional[np.ndarray] = None
    cam_t_w2c: Optional[np.ndarray] = None

    def intrinsics(self, width, height):
        return CameraIntrinsics.from_matrix(self.cam_K, width, height)


@dataclass(frozen=True, eq=False)
class ModelInfo:
    diameter: float
    min_xyz: np.ndarray
    size_xyz: np.ndarray
    symmetries: SymmetrySpec = field(default_factory=SymmetrySpec)

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError(f"diameter must be > 0, got {self.diameter}")
        largest = float(np.max(self.size_xyz))
        if self.diameter < largest - 1e-6 * self.diameter:
            raise ValueError(f"diameter {self.diameter} is smaller than the largest extent {largest}")


@dataclass(frozen=True, eq=False)
class Estimate:
    scene_id: int
    im_id: int
    obj_id: int
    score: float
    pose: Pose
    time: float
    line: int


# --- Parsing helpers ---


def _load_json_object(path):
    try:
        data = read_json(path)
    except json.JSONDecodeError as e:
        raise BopFormatError(f"invalid JSON ({e.msg} at line {e.lineno})", path=path)
    if not isinstance(data, dict):
        raise BopFormatError("expected a JSON object", path=path)
    return data


def _image_id(key, path):
    try:
        return int(key)
    except (TypeError, ValueError):
        raise BopFormatError(f"key {key!r} is not an integer id", path=path)


def _numbers(value, count, what, **where):
    if not isinstance(value, (list, tuple)) or len(value) != count:
        got = len(value) if isinstance(value, (list, tuple)) else type(value).__name__
        raise BopFormatError(f"{what} must hold {count} numbers, got {got}", **where)
    try:
        out = np.array([float(v) for v in value], dtype=np.float64)
    except (TypeError, ValueError):
        raise BopFormatError(f"{what} holds a non-numeric value", **where)
    if not np.all(np.isfinite(out)):
        raise BopFormatError(f"{what} holds a non-finite value", **where)
    return out


def checked_rotation(R):
    """
    Validates a stored rotation and snaps it onto SO(3).

    Returns the input unchanged when it is orthonormal to 1e-12, its nearest
    rotation when within ROTATION_FILE_TOLERANCE, and raises ValueError beyond.
    """
    R = np.asarray(R, dtype=np.float64).reshape(3, 3)
    deviation = max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0))
    if deviation > ROTATION_FILE_TOLERANCE:
        raise ValueError(f"rotation is not orthonormal (deviation {deviation:.3g})")
    if deviation > _REORTHONORMALIZE_ABOVE:
        return nearest_rotation(R)
    return R


# --- scene_gt.json ---


def read_scene_gt(path):
    """
    Reads scene_gt.json into {image id: [SceneGtEntry, ...]}.

    Raises:
        BopFormatError: naming the image id and entry index of the first bad record.
    """
    data = _load_json_object(path)
    scene = {}
    for key, entries in sorted(data.items(), key=lambda kv: _image_id(kv[0], path)):
        image_id = _image_id(key, path)
        if not isinstance(entries, list):
            raise BopFormatError("expected a list of entries", image_id=image_id, path=path)
        parsed = []
        for index, entry in enumerate(entries):
            where = {"image_id": image_id, "entry_index": index, "path": path}
            if not isinstance(entry, dict):
                raise BopFormatError("entry must be an object", **where)
            for required in ("obj_id", "cam_R_m2c", "cam_t_m2c"):
                if required not in entry:
                    raise BopFormatError(f"missing key '{required}'", **where)
            obj_id = entry["obj_id"]
            if isinstance(obj_id, bool) or not isinstance(obj_id, int) or obj_id < 1:
                raise BopFormatError(f"obj_id must be a positive integer, got {obj_id!r}", **where)
            R = _numbers(entry["cam_R_m2c"], 9, "cam_R_m2c", **where)
            t = _numbers(entry["cam_t_m2c"], 3, "cam_t_m2c", **where)
            try:
                R = checked_rotation(R)
            except ValueError as e:
                raise BopFormatError(str(e), **where)
            parsed.append(SceneGtEntry(obj_id, R, t))
        scene[image_id] = parsed
    logger.debug(f"Read {sum(len(v) for v in scene.values())} GT entries over {len(scene)} images from {path}")
    return scene


def write_scene_gt(path, scene):
    write_json(path, {
        str(image_id): [
            {
                "cam_R_m2c": np.asarray(e.rotation).reshape(9).tolist(),
                "cam_t_m2c": np.asarray(e.translation).reshape(3).tolist(),
                "obj_id": int(e.obj_id),
            }
            for e in entries
        ]
        for image_id, entries in sorted(scene.items())
    })


# --- scene_camera.json and camera.json ---


def read_scene_camera(path):
    data = _load_json_object(path)
    cameras = {}
    for key, record in sorted(data.items(), key=lambda kv: _image_id(kv[0], path)):
        image_id = _image_id(key, path)
        where = {"image_id": image_id, "path": path}
        if not isinstance(record, dict) or "cam_K" not in record:
            raise BopFormatError("missing key 'cam_K'", **where)
        K = _numbers(record["cam_K"], 9, "cam_K", **where).reshape(3, 3)
        depth_scale = float(record.get("depth_scale", 1.0))
        R_w2c = t_w2c = None
        if "cam_R_w2c" in record:
            try:
                R_w2c = checked_rotation(_numbers(record["cam_R_w2c"], 9, "cam_R_w2c", **where))
            except ValueError as e:
                raise BopFormatError(str(e), **where)
            t_w2c = _numbers(record.get("cam_t_w2c"), 3, "cam_t_w2c", **where)
        cameras[image_id] = SceneCamera(K, depth_scale, R_w2c, t_w2c)
    return cameras


def write_scene_camera(path, cameras):
    out = {}
    for image_id, cam in sorted(cameras.items()):
        record = {
            "cam_K": np.asarray(cam.cam_K).reshape(9).tolist(),
            "depth_scale": float(cam.depth_scale),
        }
        if cam.cam_R_w2c is not None:
            record["cam_R_w2c"] = np.asarray(cam.cam_R_w2c).reshape(9).tolist()
            record["cam_t_w2c"] = np.asarray(cam.cam_t_w2c).reshape(3).tolist()
        out[str(image_id)] = record
    write_json(path, out)


def read_camera_json(path):
    """Dataset intrinsics -> (CameraIntrinsics, depth_scale)."""
    data = _load_json_object(path)
    missing = [k for k in ("fx", "fy", "cx", "cy", "width", "height") if k not in data]
    if missing:
        raise BopFormatError(f"missing keys {missing}", path=path)
    try:
        K = CameraIntrinsics(data["fx"], data["fy"], data["cx"], data["cy"], data["width"], data["height"])
    except (TypeError, ValueError) as e:
        raise BopFormatError(str(e), path=path)
    return K, float(data.get("depth_scale", 1.0))


def write_camera_json(path, K, depth_scale=Config.DEPTH_SCALE):
    write_json(path, {
        "cx": K.cx, "cy": K.cy, "depth_scale": float(depth_scale),
        "fx": K.fx, "fy": K.fy, "height": K.height, "width": K.width,
    })


# --- Single pose files (CLI input) ---


def read_pose_json(path):
    """Reads a model-to-camera pose stored as {"cam_R_m2c": [9], "cam_t_m2c": [3]}.

    The short keys "R" and "t" are accepted as well.
    """
    data = _load_json_object(path)
    R_key = "cam_R_m2c" if "cam_R_m2c" in data else "R"
    t_key = "cam_t_m2c" if "cam_t_m2c" in data else "t"
    if R_key not in data or t_key not in data:
        raise BopFormatError("pose file needs cam_R_m2c and cam_t_m2c", path=path)
    R = _numbers(data[R_key], 9, R_key, path=path)
    t = _numbers(data[t_key], 3, t_key, path=path)
    try:
        return Pose(checked_rotation(R), t)
    except ValueError as e:
        raise BopFormatError(f"{R_key}: {e}", path=path)


def write_pose_json(path, pose):
    write_json(path, {
        "cam_R_m2c": pose.rotation.reshape(9).tolist(),
        "cam_t_m2c": pose.translation.tolist(),
    })


# --- models_info.json ---


def _parse_symmetries(record, obj_id, path):
    where = {"image_id": None, "entry_index": obj_id, "path": path}
    discrete = []
    for i, flat in enumerate(record.get("symmetries_discrete", [])):
        T = _numbers(flat, 16, f"symmetries_discrete[{i}]", **where).reshape(4, 4)
        try:
            discrete.append(Pose(checked_rotation(T[:3, :3]), T[:3, 3]))
        except ValueError as e:
            raise BopFormatError(f"symmetries_discrete[{i}]: {e}", **where)
    continuous = []
    for i, sym in enumerate(record.get("symmetries_continuous", [])):
        if not isinstance(sym, dict) or "axis" not in sym:
            raise BopFormatError(f"symmetries_continuous[{i}] needs an 'axis'", **where)
        axis = _numbers(sym["axis"], 3, f"symmetries_continuous[{i}].axis", **where)
        offset = _numbers(sym.get("offset", [0, 0, 0]), 3, f"symmetries_continuous[{i}].offset", **where)
        if not np.linalg.norm(axis) > 0:
            raise BopFormatError(f"symmetries_continuous[{i}] has a zero axis", **where)
        continuous.append((axis, offset))
    return SymmetrySpec.create(discrete, continuous)


def read_models_info(path):
    """Reads models_info.json into {obj_id: ModelInfo}."""
    data = _load_json_object(path)
    infos = {}
    for key, record in sorted(data.items(), key=lambda kv: _image_id(kv[0], path)):
        obj_id = _image_id(key, path)
        where = {"entry_index": obj_id, "path": path}
        if not isinstance(record, dict) or "diameter" not in record:
            raise BopFormatError("missing key 'diameter'", **where)
        mins = _numbers([record.get(f"min_{a}", 0.0) for a in "xyz"], 3, "min_xyz", **where)
        sizes = _numbers([record.get(f"size_{a}", 0.0) for a in "xyz"], 3, "size_xyz", **where)
        try:
            infos[obj_id] = ModelInfo(
                float(record["diameter"]), mins, sizes, _parse_symmetries(record, obj_id, path)
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, BopFormatError):
                raise
            raise BopFormatError(str(e), **where)
    return infos


def write_models_info(path, infos):
    out = {}
    for obj_id, info in sorted(infos.items()):
        record = {"diameter": float(info.diameter)}
        for i, axis in enumerate("xyz"):
            record[f"min_{axis}"] = float(info.min_xyz[i])
            record[f"size_{axis}"] = float(info.size_xyz[i])
        others = info.symmetries.discrete[1:]
        if others:
            record["symmetries_discrete"] = [s.as_matrix().reshape(16).tolist() for s in others]
        if info.symmetries.continuous_axes:
            record["symmetries_continuous"] = [
                {"axis": axis.tolist(), "offset": offset.tolist()}
                for axis, offset in info.symmetries.continuous_axes
            ]
        out[str(obj_id)] = record
    write_json(path, out)


def model_info_from_mesh(mesh, symmetries=None):
    lo, size = mesh_bounds(mesh)
    return ModelInfo(mesh_diameter(mesh), lo, size, symmetries or SymmetrySpec())


# --- scene_gt_info.json ---


def read_scene_gt_info(path):
    data = _load_json_object(path)
    return {_image_id(k, path): v for k, v in sorted(data.items(), key=lambda kv: _image_id(kv[0], path))}


def write_scene_gt_info(path, info):
    write_json(path, {str(image_id): entries for image_id, entries in sorted(info.items())})


# --- categories.json ---


def read_categories(path):
    """Reads {"<obj_id>": "Can" | "Household" | "Industry"}."""
    data = _load_json_object(path)
    categories = {}
    for key, value in data.items():
        obj_id = _image_id(key, path)
        try:
            categories[obj_id] = Category(value)
        except ValueError:
            allowed = ", ".join(c.value for c in Category)
            raise BopFormatError(f"object {obj_id} has category {value!r}, expected one of {allowed}", path=path)
    return categories


def write_categories(path, categories):
    write_json(path, {str(k): Category(v).value for k, v in sorted(categories.items())})


# --- Results CSV ---


def _csv_floats(text, count, column, line):
    parts = text.split()
    if len(parts) != count:
        raise ResultsFormatError(f"column {column} must hold {count} numbers, got {len(parts)}", line)
    try:
        values = np.array([float(p) for p in parts])
    except ValueError:
        raise ResultsFormatError(f"column {column} holds an unparsable number", line)
    if not np.all(np.isfinite(values)):
        raise ResultsFormatError(f"column {column} holds a non-finite number", line)
    return values


def read_results_csv(path):
    """
    Reads a bop19 results file (scene_id,im_id,obj_id,score,R,t,time).

    Returns:
        list[Estimate]: in file order, each carrying its line number.

    Raises:
        ResultsFormatError: wrong header, column count or number, with the line.
    """
    estimates = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != RESULTS_HEADER:
            raise ResultsFormatError(f"header must be {','.join(RESULTS_HEADER)}", 1)
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(RESULTS_HEADER):
                raise ResultsFormatError(f"expected {len(RESULTS_HEADER)} columns, got {len(row)}", line)
            try:
                scene_id, im_id, obj_id = (int(row[i]) for i in range(3))
            except ValueError:
                raise ResultsFormatError("scene_id, im_id and obj_id must be integers", line)
            score = _csv_floats(row[3], 1, "score", line)[0]
            R = _csv_floats(row[4], 9, "R", line)
            t = _csv_floats(row[5], 3, "t", line)
            time = _csv_floats(row[6], 1, "time", line)[0]
            try:
                pose = Pose(checked_rotation(R), t)
            except ValueError as e:
                raise ResultsFormatError(f"column R: {e}", line)
            estimates.append(Estimate(scene_id, im_id, obj_id, float(score), pose, float(time), line))
    logger.info(f"Read {len(estimates)} estimates from {path}")
    return estimates


def write_results_csv(path, estimates):
    with atomic_write(path, "w") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULTS_HEADER)
        for e in estimates:
            writer.writerow([
                e.scene_id, e.im_id, e.obj_id, repr(float(e.score)),
                " ".join(repr(float(v)) for v in e.pose.rotation.reshape(9)),
                " ".join(repr(float(v)) for v in e.pose.translation),
                repr(float(e.time)),
            ])


# --- Dataset evaluation ---


def scene_dir(root, scene_id):
    """Scene directory: scene_NNNNNN/ as written by the generator, else BOP's NNNNNN/."""
    for name in (f"scene_{scene_id:06d}", f"{scene_id:06d}"):
        candidate = os.path.join(root, name)
        if os.path.isdir(candidate):
            return candidate
    return None


def list_scenes(root):
    scenes = {}
    for name in sorted(os.listdir(root)):
        digits = name[len("scene_"):] if name.startswith("scene_") else name
        path = os.path.join(root, name)
        if digits.isdigit() and os.path.isfile(os.path.join(path, "scene_gt.json")):
            scenes.setdefault(int(digits), path)
    return scenes


def model_path(models_dir, obj_id):
    return os.path.join(models_dir, f"obj_{obj_id:06d}.ply")


@dataclass
class DatasetEvaluation:
    per_object: Dict[int, object]
    per_category: Dict[str, object]
    overall: object
    unmatched_estimates: int = 0

    def table(self):
        """Rows for the summary table: categories in fixed order, then overall."""
        rows = {name: self.per_category[name] for name in self.per_category}
        rows["Overall"] = self.overall
        return rows

    def as_dict(self):
        return {
            "per_object": {str(k): v.as_row() for k, v in self.per_object.items()},
            "per_category": {k: v.as_row() for k, v in self.per_category.items()},
            "overall": self.overall.as_row(),
            "unmatched_estimates": self.unmatched_estimates,
        }


@dataclass
class _ImageTask:
    scene_id: int
    im_id: int
    scene_path: str
    gt: List[SceneGtEntry]
    camera: SceneCamera
    gt_info: Optional[list]
    estimates: List[Estimate]


def _match(estimates, gts, mesh, syms, strategy):
    """Pairs estimates with GT instances of one object in one image."""
    if not estimates or not gts:
        return []
    ordered = sorted(estimates, key=lambda e: (-e.score, e.obj_id, e.line))
    vertices = mesh.vertices
    if strategy == "hungarian":
        cost = np.array([[mssd(vertices, e.pose, g.pose, syms) for _, g in gts] for e in ordered])
        rows, cols = linear_sum_assignment(cost)
        return [(ordered[r], gts[c][0]) for r, c in sorted(zip(rows, cols))]
    free = list(gts)
    pairs = []
    for est in ordered:
        if not free:
            break
        errors = [mssd(vertices, est.pose, g.pose, syms) for _, g in free]
        best = int(np.argmin(errors))
        pairs.append((est, free[best][0]))
        free.pop(best)
    return pairs


def _evaluate_image(task, context):
    """Returns ([(obj_id, report)], {obj_id: target count}, unmatched estimates)."""
    K = task.camera.intrinsics(context["width"], context["height"])
    depth_test = None
    if context["cfg"].vsd_depth_source == "scene":
        depth_file = os.path.join(task.scene_path, "depth", f"{task.im_id:06d}.png")
        if not os.path.isfile(depth_file):
            raise MissingModelError(f"scene {task.scene_id} image {task.im_id}: missing depth image {depth_file}")
        depth_test = read_depth_png(depth_file, task.camera.depth_scale)

    targets = {}
    for entry in task.gt:
        targets[entry.obj_id] = targets.get(entry.obj_id, 0) + 1

    results = []
    unmatched = 0
    for obj_id in sorted({e.obj_id for e in task.estimates} | set(targets)):
        gts = [(i, g) for i, g in enumerate(task.gt) if g.obj_id == obj_id]
        ests = [e for e in task.estimates if e.obj_id == obj_id]
        mesh = context["meshes"][obj_id]
        syms = context["symmetries"][obj_id]
        pairs = _match(ests, gts, mesh, syms, context["cfg"].matching)
        unmatched += len(ests) - len(pairs)
        for est, gt_index in pairs:
            visible = True
            if task.gt_info is not None and gt_index < len(task.gt_info):
                visible = task.gt_info[gt_index].get("visib_fract", 1.0) > 0
            report = evaluate_pose(
                mesh, est.pose, task.gt[gt_index].pose, syms, K,
                context["infos"][obj_id].diameter, context["cfg"],
                depth_test=depth_test, obj_id=obj_id,
                symmetric=context["infos"][obj_id].symmetries.is_symmetric,
                annotated_visible=visible,
            )
            results.append((obj_id, report))
    return results, targets, unmatched


def evaluate_dataset(dataset_root, results, categories=None, config=None, models_dir=None):
    """
    Evaluates estimates against a BOP dataset and summarizes per category.

    Every ground-truth instance of every scene under ``dataset_root`` is a
    target. Per image and object, estimates are taken in descending score
    (ties by row order) and each is matched to the unmatched GT instance with
    the smallest MSSD; ``config.matching='hungarian'`` minimizes the total MSSD
    instead. Unmatched targets count as misses.

    Args:
        dataset_root (str): Dataset directory.
        results (list[Estimate]): Parsed results rows.
        categories (dict[int, Category] | None): Object categories.
        config (EvalConfig | None): Evaluation settings.
        models_dir (str | None): Model directory, default <root>/models.

    Returns:
        DatasetEvaluation

    Raises:
        UnknownReferenceError: an estimate names an unknown scene, image or object.
        MissingModelError: a needed model file is missing.
    """
    cfg = config or EvalConfig()
    models_dir = models_dir or os.path.join(dataset_root, "models")
    scenes = list_scenes(dataset_root)
    if not scenes:
        raise MissingModelError(f"no scene directories with scene_gt.json under {dataset_root}")

    camera_file = os.path.join(dataset_root, "camera.json")
    if os.path.isfile(camera_file):
        K_default, _ = read_camera_json(camera_file)
        width, height = K_default.width, K_default.height
    else:
        width, height = Config.DEFAULT_IMAGE_WIDTH, Config.DEFAULT_IMAGE_HEIGHT
        logger.warning(f"No camera.json in {dataset_root}; assuming {width}x{height} images")

    gt_by_scene = {}
    cams_by_scene = {}
    info_by_scene = {}
    for scene_id, path in scenes.items():
        gt_by_scene[scene_id] = read_scene_gt(os.path.join(path, "scene_gt.json"))
        cams_by_scene[scene_id] = read_scene_camera(os.path.join(path, "scene_camera.json"))
        info_file = os.path.join(path, "scene_gt_info.json")
        info_by_scene[scene_id] = read_scene_gt_info(info_file) if os.path.isfile(info_file) else {}

    obj_ids = {e.obj_id for scene in gt_by_scene.values() for entries in scene.values() for e in entries}
    for est in results:
        if est.scene_id not in gt_by_scene:
            raise UnknownReferenceError(f"results line {est.line}: unknown scene {est.scene_id}")
        if est.im_id not in gt_by_scene[est.scene_id]:
            raise UnknownReferenceError(
                f"results line {est.line}: unknown image {est.im_id} in scene {est.scene_id}"
            )
        if est.obj_id not in obj_ids and not os.path.isfile(model_path(models_dir, est.obj_id)):
            raise UnknownReferenceError(f"results line {est.line}: unknown obj_id {est.obj_id}")
    obj_ids |= {e.obj_id for e in results}

    if categories is not None:
        missing = sorted(o for o in obj_ids if o not in categories)
        if missing:
            raise UnknownReferenceError(f"objects {missing} have no category")

    meshes = {}
    for obj_id in sorted(obj_ids):
        path = model_path(models_dir, obj_id)
        if not os.path.isfile(path):
            raise MissingModelError(f"missing model file for object {obj_id}: {path}")
        meshes[obj_id] = load_mesh(path)

    info_file = os.path.join(models_dir, "models_info.json")
    if os.path.isfile(info_file):
        infos = read_models_info(info_file)
    else:
        logger.warning(f"No models_info.json in {models_dir}; measuring diameters from the meshes")
        infos = {}
    for obj_id in sorted(obj_ids):
        if obj_id not in infos:
            infos[obj_id] = model_info_from_mesh(meshes[obj_id])
    symmetries = {o: expand_symmetries(infos[o].symmetries, cfg.symmetry_step_deg) for o in sorted(obj_ids)}

    grouped = {}
    for est in results:
        grouped.setdefault((est.scene_id, est.im_id), []).append(est)
    tasks = [
        _ImageTask(
            scene_id, im_id, scenes[scene_id], entries,
            cams_by_scene[scene_id].get(im_id) or _missing_camera(scene_id, im_id),
            info_by_scene[scene_id].get(im_id),
            grouped.get((scene_id, im_id), []),
        )
        for scene_id in sorted(gt_by_scene)
        for im_id, entries in sorted(gt_by_scene[scene_id].items())
    ]
    context = {
        "cfg": cfg, "meshes": meshes, "symmetries": symmetries, "infos": infos,
        "width": width, "height": height,
    }

    logger.info(f"Evaluating {len(results)} estimates over {len(tasks)} images ({cfg.jobs} jobs)")
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        outputs = list(tqdm(
            pool.map(lambda task: _evaluate_image(task, context), tasks),
            total=len(tasks), desc="Evaluating", unit="img", disable=None,
        ))

    reports = {o: [] for o in sorted(obj_ids)}
    targets = {o: 0 for o in sorted(obj_ids)}
    unmatched = 0
    for image_reports, image_targets, image_unmatched in outputs:
        for obj_id, report in image_reports:
            reports[obj_id].append(report)
        for obj_id, count in image_targets.items():
            targets[obj_id] += count
        unmatched += image_unmatched

    per_object = {
        o: summarize_reports(reports[o], infos[o].diameter, width, cfg, targets=targets[o])
        for o in sorted(obj_ids)
    }
    per_category = {}
    if categories is not None:
        for category in Category:
            members = [per_object[o] for o in sorted(obj_ids) if categories[o] == category]
            if members:
                per_category[category.value] = merge_summaries(members)
    overall = merge_summaries(per_object.values())
    if unmatched:
        logger.info(f"{unmatched} estimates had no ground-truth instance left to match")
    ar = overall.ar
    logger.info(f"Overall AR: {ar:.4f}" if ar is not None else "Overall AR: n/a (no targets)")
    return DatasetEvaluation(per_object, per_category, overall, unmatched)


def _missing_camera(scene_id, im_id):
    raise BopFormatError(f"scene {scene_id} has no scene_camera entry for image {im_id}", image_id=im_id)
