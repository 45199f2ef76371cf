# salientpose/models.py
"""Validated parameter and record types shared by the library and the CLI."""

from datetime import datetime, timezone
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .config import Config


# Helper function for default timestamps
def default_utcnow():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


def _ordered_range(value, name, lo=None, hi=None):
    low, high = value
    if low > high:
        raise ValueError(f"{name} must be (min, max) with min <= max, got {value}")
    if lo is not None and low < lo or hi is not None and high > hi:
        raise ValueError(f"{name} must lie within [{lo}, {hi}], got {value}")
    return value


# --- Keypoints ---


class NeighborhoodConfig(_Record):
    """Neighbourhood used for the covariance (k nearest) and the density (radius, mm)."""

    k: int = Field(default=Config.NEIGHBOR_K, ge=4)
    density_radius: float = Field(gt=0)


class KeypointParams(_Record):
    samples: int = Field(default=Config.SURFACE_SAMPLES, ge=1)
    k: int = Field(default=Config.NEIGHBOR_K, ge=4)
    density_radius_factor: float = Field(default=Config.DENSITY_RADIUS_FACTOR, gt=0)
    # Absolute radius in mm; when unset, density_radius_factor x mean sample spacing.
    density_radius: Optional[float] = Field(default=None, gt=0)
    tau_rel: float = Field(default=Config.TAU_REL, ge=0)
    # Absolute threshold on S; overrides tau_rel when given.
    tau: Optional[float] = Field(default=None, ge=0)
    # None means "same as the density radius"; 0 disables suppression.
    nms_radius: Optional[float] = Field(default=None, ge=0)
    # None means unlimited.
    max_keypoints: Optional[int] = Field(default=Config.MAX_KEYPOINTS, ge=1)
    seed: int = Config.SEED
    use_density: bool = True
    visibility_eps: Optional[float] = Field(default=None, gt=0)

    def neighborhood(self, mean_spacing):
        radius = self.density_radius or self.density_radius_factor * mean_spacing
        return NeighborhoodConfig(k=self.k, density_radius=radius)


class HeatmapParams(_Record):
    width: int = Field(default=Config.HEATMAP_WIDTH, ge=1)
    height: int = Field(default=Config.HEATMAP_HEIGHT, ge=1)
    sigma: float = Field(default=Config.HEATMAP_SIGMA, gt=0)
    combine: Literal["max", "sum"] = Config.HEATMAP_COMBINE


class RenderParams(_Record):
    depth_scale: float = Field(default=Config.DEPTH_SCALE, gt=0)
    write_raw: bool = False


# --- Scene generation ---


class GenConfig(_Record):
    """Scene-generation settings. Distances in mm, angles implicit in the sampler."""

    mode: Literal["MiSo", "SiMo"] = "MiSo"
    scene_count: int = Field(default=1, ge=1)
    cameras_per_scene: int = Field(default=5, ge=1)
    seed: int = Config.SEED
    max_instances: int = Field(default=Config.MAX_INSTANCES, ge=1, le=Config.MAX_INSTANCES)
    placement_min: Tuple[float, float, float] = (-150.0, -150.0, 0.0)
    placement_max: Tuple[float, float, float] = (150.0, 150.0, 150.0)
    camera_distance: Tuple[float, float] = (400.0, 800.0)
    image_width: int = Field(default=Config.DEFAULT_IMAGE_WIDTH, ge=1)
    image_height: int = Field(default=Config.DEFAULT_IMAGE_HEIGHT, ge=1)
    fx: float = Field(default=572.4, gt=0)
    fy: float = Field(default=572.4, gt=0)
    cx: float = 320.0
    cy: float = 240.0
    depth_scale: float = Field(default=Config.DEPTH_SCALE, gt=0)
    metallic_range: Tuple[float, float] = (0.5, 1.0)
    specular_range: Tuple[float, float] = (0.3, 1.0)
    roughness_range: Tuple[float, float] = (0.0, 0.5)
    distractor_count: int = Field(default=0, ge=0)
    reflective_plane: bool = False
    jobs: int = Field(default=Config.JOBS, ge=1)

    @field_validator("mode", mode="before")
    @classmethod
    def _normalize_mode(cls, value):
        if isinstance(value, str):
            lookup = {"miso": "MiSo", "simo": "SiMo"}
            return lookup.get(value.lower(), value)
        return value

    @field_validator("camera_distance")
    @classmethod
    def _check_distance(cls, value):
        _ordered_range(value, "camera_distance")
        if value[0] <= 0:
            raise ValueError(f"camera_distance must be positive, got {value}")
        return value

    @field_validator("metallic_range", "specular_range", "roughness_range")
    @classmethod
    def _check_material(cls, value, info):
        return _ordered_range(value, info.field_name, 0.0, 1.0)

    @model_validator(mode="after")
    def _check_box(self):
        for lo, hi in zip(self.placement_min, self.placement_max):
            if lo > hi:
                raise ValueError(
                    f"placement box min {self.placement_min} exceeds max {self.placement_max}"
                )
        return self


# --- Evaluation ---


def _bop19_fractions():
    return [round(0.05 * i, 2) for i in range(1, 11)]


class EvalConfig(_Record):
    vsd_delta: float = Field(default=Config.VSD_DELTA_MM, gt=0)
    # VSD tau values as fractions of the object diameter.
    vsd_tau_fractions: List[float] = Field(default_factory=_bop19_fractions)
    vsd_thresholds: List[float] = Field(default_factory=_bop19_fractions)
    mssd_thresholds: List[float] = Field(default_factory=_bop19_fractions)
    # MSPD thresholds in pixels at 640 px image width.
    mspd_thresholds: List[float] = Field(default_factory=lambda: [5.0 * i for i in range(1, 11)])
    symmetry_step_deg: float = Field(default=Config.SYMMETRY_STEP_DEG, gt=0)
    vsd_depth_source: Literal["gt_render", "scene"] = "gt_render"
    matching: Literal["greedy", "hungarian"] = "greedy"
    grid: Literal["bop19"] = "bop19"
    jobs: int = Field(default=Config.JOBS, ge=1)

    @field_validator("vsd_tau_fractions", "vsd_thresholds", "mssd_thresholds", "mspd_thresholds")
    @classmethod
    def _positive(cls, value, info):
        if not value or any(v <= 0 for v in value):
            raise ValueError(f"{info.field_name} must be a nonempty list of positive numbers")
        return value


# --- Reproducibility ---


class RunManifest(_Record):
    command: str
    config: Dict[str, object]
    seed: Optional[int] = None
    version: str
    inputs: Dict[str, str] = Field(default_factory=dict)
    wall_time_s: float = Field(ge=0)
    created_at: str = Field(default_factory=default_utcnow)
