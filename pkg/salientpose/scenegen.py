# salientpose/scenegen.py
"""MiSo / SiMo scene layouts, camera sampling and BOP ground-truth emission.

MiSo scenes hold 1-10 instances of one object, SiMo scenes 1-10 distinct
objects. Instances float in a placement box with disjoint bounding spheres.
Lighting, background and material values are recorded as metadata only; the
depth output does not depend on them.
"""

import enum
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Tuple

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from .bopio import (
    SceneCamera,
    SceneGtEntry,
    model_info_from_mesh,
    write_camera_json,
    write_models_info,
    write_scene_camera,
    write_scene_gt,
    write_scene_gt_info,
)
from .config import Config
from .exceptions import CameraPlacementError, MissingModelError, PlacementError
from .file_utils import allowed_file, atomic_write, staged_directory, write_json
from .geometry import bounding_sphere, load_mesh, save_mesh
from .raster import CameraIntrinsics, Pose, project, rasterize_depth, rasterize_scene, write_depth_png

logger = logging.getLogger(__name__)

_LAYOUT_STREAM = 0
_CAMERA_STREAM = 1
_UP_SWITCH_COS = math.cos(math.radians(1.0))
DISTRACTOR_OBJ_ID = 0


class Mode(str, enum.Enum):
    MISO = "MiSo"
    SIMO = "SiMo"


class Lighting(str, enum.Enum):
    AMBIENT_POINT = "ambient+point"
    POINT = "point"
    AMBIENT = "ambient"
    AMBIENT_SPOT = "ambient+spot"
    MULTI_SPOT = "multi-spot"


class Background(str, enum.Enum):
    BLACK = "Black"
    FLOOR_TEXTURE = "FloorTexture"
    HDRI = "HDRI"


# Scenes x cameras per (object, lighting, background) combination.
DATASET_PRESETS = {Mode.MISO: (10, 5), Mode.SIMO: (120, 25)}
TEST_IMAGES_PER_BACKGROUND = 300


# --- Layout types ---


@dataclass(frozen=True)
class Material:
    metallic: float
    specular: float
    roughness: float

    def as_dict(self):
        return {"metallic": self.metallic, "specular": self.specular, "roughness": self.roughness}


@dataclass(frozen=True, eq=False)
class Instance:
    """One placed mesh; ``pose`` maps model to world coordinates (mm)."""

    obj_id: int
    pose: Pose
    material: Material
    center: np.ndarray
    radius: float
    mesh: object = field(repr=False, default=None)


@dataclass(frozen=True, eq=False)
class SceneLayout:
    scene_index: int
    mode: Mode
    instances: Tuple[Instance, ...]
    lighting: Lighting
    background: Background
    distractors: Tuple[Instance, ...] = ()
    reflective_plane: bool = False

    def __post_init__(self):
        count = len(self.instances)
        if not 1 <= count <= Config.MAX_INSTANCES:
            raise ValueError(f"scene must hold 1..{Config.MAX_INSTANCES} instances, got {count}")
        ids = [inst.obj_id for inst in self.instances]
        if self.mode == Mode.MISO and len(set(ids)) != 1:
            raise ValueError(f"MiSo scene mixes objects {sorted(set(ids))}")
        if self.mode == Mode.SIMO and len(set(ids)) != count:
            raise ValueError(f"SiMo scene repeats objects {ids}")
        placed = list(self.instances) + list(self.distractors)
        for i in range(len(placed)):
            for j in range(i + 1, len(placed)):
                gap = np.linalg.norm(placed[i].center - placed[j].center)
                if gap <= placed[i].radius + placed[j].radius:
                    raise ValueError(f"instances {i} and {j} have overlapping bounding spheres")

    @property
    def centroid(self):
        return np.mean([inst.center for inst in self.instances], axis=0)


def scene_rng(seed, scene_index, stream):
    """Independent generator per (seed, scene, stream)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_index), stream]))


def intrinsics_from_config(cfg):
    return CameraIntrinsics(cfg.fx, cfg.fy, cfg.cx, cfg.cy, cfg.image_width, cfg.image_height)


# --- Layout sampling ---


def _sample_material(rng, cfg):
    return Material(
        metallic=float(rng.uniform(*cfg.metallic_range)),
        specular=float(rng.uniform(*cfg.specular_range)),
        roughness=float(rng.uniform(*cfg.roughness_range)),
    )


def _place(rng, slots, cfg):
    """Rejection-samples disjoint bounding spheres; None when attempts run out."""
    lo = np.asarray(cfg.placement_min, dtype=np.float64)
    hi = np.asarray(cfg.placement_max, dtype=np.float64)
    placed = []
    attempts = 0
    for obj_id, mesh, local_center, radius in slots:
        while True:
            if attempts >= Config.PLACEMENT_ATTEMPTS:
                return None
            attempts += 1
            center = rng.uniform(lo, hi)
            if all(np.linalg.norm(center - p.center) > radius + p.radius for p in placed):
                break
        R = Rotation.random(random_state=rng).as_matrix()
        pose = Pose(R, center - R @ local_center)
        placed.append(Instance(obj_id, pose, _sample_material(rng, cfg), center, radius, mesh))
    return placed


def sample_layout(objects, cfg, scene_index, distractors=()):
    """
    Samples one scene layout, fully determined by (cfg.seed, scene_index).

    The instance count is uniform in 1..cfg.max_instances. MiSo scenes cycle
    through ``objects`` by scene index; SiMo scenes draw distinct objects, with
    the count capped at the number of objects. When placement fails after
    10^4 attempts the scene is retried with one instance fewer.

    Args:
        objects: Sequence of (obj_id, TriMesh).
        cfg (GenConfig): Generation settings.
        scene_index (int): Scene number.
        distractors: Sequence of TriMesh placed as obj_id 0 (not ground truth).

    Raises:
        PlacementError: even a single instance cannot be placed.
    """
    if not objects:
        raise ValueError("sample_layout needs at least one object")
    if cfg.distractor_count and not distractors:
        raise ValueError("distractor_count > 0 needs distractor meshes")
    mode = Mode(cfg.mode)
    rng = scene_rng(cfg.seed, scene_index, _LAYOUT_STREAM)
    count = int(rng.integers(1, cfg.max_instances + 1))
    lighting = list(Lighting)[int(rng.integers(len(Lighting)))]
    background = list(Background)[int(rng.integers(len(Background)))]
    if mode == Mode.SIMO and count > len(objects):
        logger.warning(f"Scene {scene_index}: SiMo drew {count} instances but only {len(objects)} objects exist")
        count = len(objects)

    spheres = {obj_id: bounding_sphere(mesh) for obj_id, mesh in objects}
    distractor_spheres = [bounding_sphere(mesh) for mesh in distractors]
    while True:
        if mode == Mode.MISO:
            picks = [scene_index % len(objects)] * count
        else:
            picks = [int(i) for i in rng.choice(len(objects), size=count, replace=False)]
        slots = [(objects[i][0], objects[i][1], *spheres[objects[i][0]]) for i in picks]
        for _ in range(cfg.distractor_count):
            k = int(rng.integers(len(distractors)))
            slots.append((DISTRACTOR_OBJ_ID, distractors[k], *distractor_spheres[k]))
        placed = _place(rng, slots, cfg)
        if placed is not None:
            break
        if count == 1:
            raise PlacementError(f"scene {scene_index}: could not place a single instance in the placement box")
        count -= 1
        logger.info(f"Scene {scene_index}: placement failed, retrying with {count} instances")

    layout = SceneLayout(
        scene_index=scene_index,
        mode=mode,
        instances=tuple(p for p in placed if p.obj_id != DISTRACTOR_OBJ_ID),
        lighting=lighting,
        background=background,
        distractors=tuple(p for p in placed if p.obj_id == DISTRACTOR_OBJ_ID),
        reflective_plane=cfg.reflective_plane,
    )
    logger.debug(
        f"Scene {scene_index}: {len(layout.instances)} instances of {sorted({i.obj_id for i in layout.instances})}, "
        f"lighting={lighting.value}, background={background.value}"
    )
    return layout


# --- Cameras ---


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """
    World-to-camera pose looking from ``eye`` at ``target`` (OpenCV axes).

    When the view direction is within 1 degree of ``up`` the up vector switches
    to +x.
    """
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > _UP_SWITCH_COS:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    return Pose(R, -R @ eye)


def sample_cameras(layout, cfg, count):
    """
    Samples ``count`` world-to-camera poses around the layout centroid.

    Camera centres are uniform on the upper hemisphere at a distance uniform in
    cfg.camera_distance, looking at the centroid. Each camera is redrawn until
    every instance centre projects inside the image.

    Raises:
        CameraPlacementError: no valid camera within 10^3 attempts.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    rng = scene_rng(cfg.seed, layout.scene_index, _CAMERA_STREAM)
    K = intrinsics_from_config(cfg)
    centroid = layout.centroid
    centers = np.array([inst.center for inst in layout.instances])
    cameras = []
    for index in range(count):
        for _ in range(Config.CAMERA_ATTEMPTS):
            z = rng.uniform(0.0, 1.0)
            phi = rng.uniform(0.0, 2.0 * math.pi)
            ring = math.sqrt(1.0 - z * z)
            direction = np.array([ring * math.cos(phi), ring * math.sin(phi), z])
            distance = rng.uniform(*cfg.camera_distance)
            pose = look_at(centroid + distance * direction, centroid)
            uv, _, valid = project(K, pose, centers)
            if valid.all() and np.all((uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)):
                cameras.append(pose)
                break
        else:
            raise CameraPlacementError(
                f"scene {layout.scene_index}: camera {index} kept instances out of view "
                f"after {Config.CAMERA_ATTEMPTS} attempts"
            )
    return cameras


# --- Emission ---


def _bbox(mask):
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    if rows.size == 0:
        return [-1, -1, -1, -1]
    return [int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1)]


def _write_mask(path, mask):
    with atomic_write(path, "wb") as fh:
        Image.fromarray((mask * 255).astype(np.uint8)).save(fh, format="PNG")


def emit_bop_scene(layout, cameras, K, out_dir, depth_scale=Config.DEPTH_SCALE):
    """
    Writes one scene in BOP layout under ``out_dir``.

    Files: scene_gt.json, scene_camera.json, scene_gt_info.json, metadata.json,
    depth/NNNNNN.png and mask_visib/NNNNNN_MMMMMM.png (instance visible in the
    full scene, distractors included as occluders).

    Returns:
        dict: {image id: [visible fraction per instance]}.
    """
    placed = list(layout.instances) + list(layout.distractors)
    for inst in placed:
        if inst.mesh is None:
            raise MissingModelError(f"scene {layout.scene_index}: no mesh for object {inst.obj_id}")
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "mask_visib"), exist_ok=True)

    scene_gt, scene_camera, gt_info, visib = {}, {}, {}, {}
    for im_id, cam in enumerate(cameras):
        poses = [cam.compose(inst.pose) for inst in placed]
        depth, owner = rasterize_scene([(inst.mesh, pose) for inst, pose in zip(placed, poses)], K)
        write_depth_png(os.path.join(out_dir, "depth", f"{im_id:06d}.png"), depth, depth_scale)

        entries, infos, fractions = [], [], []
        for j, inst in enumerate(layout.instances):
            alone = rasterize_depth(inst.mesh, poses[j], K).values > 0
            visible = owner == j
            _write_mask(os.path.join(out_dir, "mask_visib", f"{im_id:06d}_{j:06d}.png"), visible)
            px_all = int(alone.sum())
            px_visib = int(visible.sum())
            fraction = px_visib / px_all if px_all else 0.0
            entries.append(SceneGtEntry(inst.obj_id, poses[j].rotation, poses[j].translation))
            infos.append({
                "bbox_obj": _bbox(alone),
                "bbox_visib": _bbox(visible),
                "px_count_all": px_all,
                "px_count_valid": px_all,
                "px_count_visib": px_visib,
                "visib_fract": fraction,
            })
            fractions.append(fraction)
        scene_gt[im_id] = entries
        scene_camera[im_id] = SceneCamera(K.matrix, depth_scale, cam.rotation, cam.translation)
        gt_info[im_id] = infos
        visib[im_id] = fractions

    write_scene_gt(os.path.join(out_dir, "scene_gt.json"), scene_gt)
    write_scene_camera(os.path.join(out_dir, "scene_camera.json"), scene_camera)
    write_scene_gt_info(os.path.join(out_dir, "scene_gt_info.json"), gt_info)
    write_json(os.path.join(out_dir, "metadata.json"), {
        "scene_index": layout.scene_index,
        "mode": layout.mode.value,
        "lighting": layout.lighting.value,
        "background": layout.background.value,
        "reflective_plane": layout.reflective_plane,
        "instances": [
            {"obj_id": inst.obj_id, "material": inst.material.as_dict(),
             "cam_R_m2w": inst.pose.rotation.reshape(9).tolist(),
             "cam_t_m2w": inst.pose.translation.tolist()}
            for inst in layout.instances
        ],
        "distractors": [
            {"obj_id": inst.obj_id, "material": inst.material.as_dict(),
             "cam_R_m2w": inst.pose.rotation.reshape(9).tolist(),
             "cam_t_m2w": inst.pose.translation.tolist()}
            for inst in layout.distractors
        ],
        "visib_fract": {str(k): v for k, v in visib.items()},
    })
    logger.info(
        f"Wrote scene {layout.scene_index} to {out_dir}: {len(cameras)} images, "
        f"{len(layout.instances)} instances"
    )
    return visib


# --- Dataset driver ---


def load_models_dir(models_dir):
    """Loads obj_NNNNNN.ply files as [(obj_id, TriMesh)] sorted by id."""
    objects = []
    for name in sorted(os.listdir(models_dir)):
        stem = name.rsplit(".", 1)[0]
        if allowed_file(name, {"ply"}) and stem.startswith("obj_") and stem[4:].isdigit():
            objects.append((int(stem[4:]), load_mesh(os.path.join(models_dir, name))))
    if not objects:
        raise MissingModelError(f"no obj_NNNNNN.ply models in {models_dir}")
    return objects


def _generate_scene(objects, cfg, scene_index, out_dir, distractors):
    layout = sample_layout(objects, cfg, scene_index, distractors)
    cameras = sample_cameras(layout, cfg, cfg.cameras_per_scene)
    scene_path = os.path.join(out_dir, f"scene_{scene_index:06d}")
    emit_bop_scene(layout, cameras, intrinsics_from_config(cfg), scene_path, cfg.depth_scale)
    return layout


def generate_dataset(objects, cfg, out_dir, distractors=()):
    """
    Generates cfg.scene_count scenes plus dataset-level camera.json and models/.

    Scenes are independent (own seed stream, own directory) and run on
    cfg.jobs threads; the output does not depend on the job count. Everything
    is built in a staging directory next to ``out_dir`` and moved into place
    only after every scene succeeded, so a failed run leaves no partial output.
    """
    K = intrinsics_from_config(cfg)
    logger.info(f"Generating {cfg.scene_count} {cfg.mode} scenes x {cfg.cameras_per_scene} cameras into {out_dir}")
    with staged_directory(out_dir) as staging:
        write_camera_json(os.path.join(staging, "camera.json"), K, cfg.depth_scale)
        models_out = os.path.join(staging, "models")
        infos = {}
        for obj_id, mesh in objects:
            save_mesh(mesh, os.path.join(models_out, f"obj_{obj_id:06d}.ply"))
            infos[obj_id] = model_info_from_mesh(mesh)
        write_models_info(os.path.join(models_out, "models_info.json"), infos)

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            layouts = list(tqdm(
                pool.map(lambda i: _generate_scene(objects, cfg, i, staging, distractors), range(cfg.scene_count)),
                total=cfg.scene_count, desc="Scenes", unit="scene", disable=None,
            ))
    return layouts


# --- Dataset bookkeeping ---


def combinations(mode, objects):
    """(object, lighting, background) combinations one preset is rendered for.

    MiSo scenes are per object; SiMo scenes mix objects, so only lighting and
    background multiply.
    """
    per_setting = len(Lighting) * len(Background)
    return objects * per_setting if Mode(mode) == Mode.MISO else per_setting


def images_per_combination(scenes, cameras):
    return scenes * cameras


def dataset_image_count(mode, objects, scenes=None, cameras=None):
    preset_scenes, preset_cameras = DATASET_PRESETS[Mode(mode)]
    scenes = preset_scenes if scenes is None else scenes
    cameras = preset_cameras if cameras is None else cameras
    return images_per_combination(scenes, cameras) * combinations(mode, objects)


def testset_image_count(per_background=TEST_IMAGES_PER_BACKGROUND):
    return per_background * len(Background) * len(Mode)
