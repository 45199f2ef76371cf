# salientpose/commands/common.py
"""Helpers shared by the command modules: settings, inputs and manifests."""

import logging
import os
import time

import click
from pydantic import ValidationError

from ..config import load_config_file, resolve_settings
from ..file_utils import file_digest, write_json
from ..models import RunManifest
from ..raster import CameraIntrinsics

logger = logging.getLogger(__name__)


def build_settings(ctx, command, model_cls, flags):
    """
    Resolves flags > config file > defaults and validates them.

    Keys of a flat config file that ``model_cls`` does not know are ignored with
    a warning, so one flat file can serve several commands.

    Raises:
        click.UsageError: the merged settings do not validate (exit code 2).
    """
    obj = ctx.find_root().obj or {}
    file_settings = load_config_file(obj.get("config_path"), command)
    known = {k: v for k, v in file_settings.items() if k in model_cls.model_fields}
    ignored = sorted(set(file_settings) - set(known))
    if ignored:
        logger.warning(f"Config keys not used by '{command}': {ignored}")
    flags = dict(flags)
    if "jobs" in model_cls.model_fields:
        flags.setdefault("jobs", obj.get("jobs"))
    try:
        return model_cls(**resolve_settings({}, known, flags))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or 'settings'}: {err['msg']}" for err in e.errors()
        )
        raise click.UsageError(f"invalid settings for '{command}': {problems}", ctx=ctx)


def parse_size(value):
    """'WxH' -> (width, height)."""
    try:
        width, height = (int(part) for part in value.lower().split("x"))
    except ValueError:
        raise click.BadParameter(f"expected WxH, got {value!r}", param_hint="--size")
    if width < 1 or height < 1:
        raise click.BadParameter(f"size must be at least 1x1, got {value!r}", param_hint="--size")
    return width, height


def fit_intrinsics(K, width, height):
    """Rescales intrinsics so the camera's full image maps onto width x height."""
    sx = width / K.width
    sy = height / K.height
    return CameraIntrinsics(K.fx * sx, K.fy * sy, K.cx * sx, K.cy * sy, width, height)


# --- Run manifests ---


def manifest_path(output):
    """<stem>.manifest.json next to a file output, manifest.json inside a directory."""
    if os.path.isdir(output):
        return os.path.join(output, "manifest.json")
    stem, _ = os.path.splitext(output)
    return f"{stem}.manifest.json"


def write_manifest(output, command, settings, started, inputs=(), seed=None):
    """
    Writes the run manifest for ``output``.

    Args:
        output (str): The primary output file or directory.
        command (str): Command name.
        settings (dict): Fully resolved settings.
        started (float): time.perf_counter() at command start.
        inputs: Paths of every input file; directories are skipped.
        seed (int | None): Seed in effect, if any.
    """
    from .. import __version__

    digests = {}
    for path in inputs:
        if path and os.path.isfile(path):
            digests[os.path.abspath(path)] = file_digest(path)
    manifest = RunManifest(
        command=command,
        config=settings,
        seed=seed,
        version=__version__,
        inputs=digests,
        wall_time_s=time.perf_counter() - started,
    )
    target = manifest_path(output)
    write_json(target, manifest.model_dump())
    logger.info(f"Wrote manifest {target}")
    return target
