# salientpose/config.py
import json
import os
from dotenv import load_dotenv

import logging

logger = logging.getLogger(__name__)

# Load environment variables from .env file if it exists
load_dotenv()


def _env_float(name, default):
    return float(os.environ.get(name, default))


def _env_int(name, default):
    return int(os.environ.get(name, default))


class Config:
    """Built-in defaults. Every value can be overridden via a SALIENTPOSE_* env var."""

    # General
    LOG_LEVEL = os.environ.get("SALIENTPOSE_LOG_LEVEL", "INFO").upper()
    JOBS = _env_int("SALIENTPOSE_JOBS", 1)

    # Surface sampling / saliency
    SURFACE_SAMPLES = _env_int("SALIENTPOSE_SURFACE_SAMPLES", 5000)
    NEIGHBOR_K = _env_int("SALIENTPOSE_NEIGHBOR_K", 16)
    DENSITY_RADIUS_FACTOR = _env_float("SALIENTPOSE_DENSITY_RADIUS_FACTOR", 2.0)
    TAU_REL = _env_float("SALIENTPOSE_TAU_REL", 0.6)
    MAX_KEYPOINTS = _env_int("SALIENTPOSE_MAX_KEYPOINTS", 64)
    SEED = _env_int("SALIENTPOSE_SEED", 0)

    # Heatmaps (64x64 / sigma 2 px are conventions, not measured values)
    HEATMAP_WIDTH = _env_int("SALIENTPOSE_HEATMAP_WIDTH", 64)
    HEATMAP_HEIGHT = _env_int("SALIENTPOSE_HEATMAP_HEIGHT", 64)
    HEATMAP_SIGMA = _env_float("SALIENTPOSE_HEATMAP_SIGMA", 2.0)
    HEATMAP_COMBINE = os.environ.get("SALIENTPOSE_HEATMAP_COMBINE", "max")

    # Rasterization
    NEAR_PLANE_MM = 0.1
    DEPTH_SCALE = _env_float("SALIENTPOSE_DEPTH_SCALE", 0.1)  # mm per PNG unit
    MIN_VISIBILITY_EPS_MM = 0.5
    VISIBILITY_EPS_DIAMETER_FRACTION = 0.002

    # Evaluation (BOP19 conventions)
    VSD_DELTA_MM = _env_float("SALIENTPOSE_VSD_DELTA", 15.0)
    SYMMETRY_STEP_DEG = _env_float("SALIENTPOSE_SYMMETRY_STEP_DEG", 1.0)
    DEFAULT_IMAGE_WIDTH = 640
    DEFAULT_IMAGE_HEIGHT = 480

    # Scene generation
    MAX_INSTANCES = 10
    PLACEMENT_ATTEMPTS = 10_000
    CAMERA_ATTEMPTS = 1_000


def load_config_file(path, command=None):
    """
    Reads a JSON config file for one command.

    The file is either a flat object of settings, or an object keyed by command
    name whose value holds that command's settings.

    Args:
        path (str | None): Path to the JSON file, or None for no file.
        command (str | None): Command name used to pick a section.

    Returns:
        dict: Settings from the file (empty when no file was given).
    """
    if not path:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a JSON object")
    if command and isinstance(data.get(command), dict):
        data = data[command]
    logger.info(f"Loaded {len(data)} settings from config file {path}")
    return data


def resolve_settings(defaults, file_settings, flags):
    """Merges settings with precedence flags > config file > defaults.

    Flags left at ``None`` (not given on the command line) do not override.
    """
    merged = dict(defaults)
    for key, value in file_settings.items():
        merged[key] = value
    for key, value in flags.items():
        if value is not None:
            merged[key] = value
    return merged
