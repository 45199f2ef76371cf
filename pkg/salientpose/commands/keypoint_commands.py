# salientpose/commands/keypoint_commands.py
import logging
import os
import time

import click

from ..bopio import read_camera_json, read_pose_json
from ..exceptions import PipelineError
from ..geometry import load_mesh
from ..keypoints import (
    extract_keypoints,
    read_keypoints_json,
    render_heatmap,
    write_heatmap_png,
    write_keypoints_json,
)
from ..models import HeatmapParams, KeypointParams, RenderParams
from ..raster import rasterize_depth, write_depth_png, write_raw
from .common import build_settings, fit_intrinsics, parse_size, write_manifest

# Configure logging
logger = logging.getLogger(__name__)


def _sibling(path, suffix):
    stem, _ = os.path.splitext(path)
    return f"{stem}{suffix}"


def _camera_and_pose(camera_path, pose_path):
    if (camera_path is None) != (pose_path is None):
        raise click.UsageError("--camera and --pose must be given together")
    if camera_path is None:
        return None, None
    K, _ = read_camera_json(camera_path)
    return K, read_pose_json(pose_path)


@click.command("keypoints")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.option("--samples", type=click.IntRange(min=1), help="Surface samples.")
@click.option("--k", "k", type=click.IntRange(min=4), help="Neighbours for the covariance.")
@click.option("--tau-rel", type=click.FloatRange(min=0), help="Threshold as a fraction of the maximum saliency.")
@click.option("--nms-radius", type=click.FloatRange(min=0), help="Suppression radius in mm (0 disables).")
@click.option("--max-kp", "max_keypoints", type=click.IntRange(min=1), help="Maximum number of keypoints.")
@click.option("--seed", type=int, help="Sampling seed.")
@click.option("--no-density", is_flag=True, help="Score by curvature only.")
@click.option("--camera", "camera_path", type=click.Path(dir_okay=False), help="camera.json for visibility filtering.")
@click.option("--pose", "pose_path", type=click.Path(dir_okay=False), help="Model-to-camera pose JSON.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Keypoint JSON to write.")
@click.pass_context
def keypoints(ctx, model_path, samples, k, tau_rel, nms_radius, max_keypoints, seed, no_density,
              camera_path, pose_path, out_path):
    """Extract salient keypoints from a PLY model.

    With --camera and --pose, a second set restricted to the surface visible in
    that view is written to <out stem>.visible.json.
    """
    started = time.perf_counter()
    params = build_settings(ctx, "keypoints", KeypointParams, {
        "samples": samples,
        "k": k,
        "tau_rel": tau_rel,
        "nms_radius": nms_radius,
        "max_keypoints": max_keypoints,
        "seed": seed,
        "use_density": False if no_density else None,
    })
    K, pose = _camera_and_pose(camera_path, pose_path)
    logger.info(f"Extracting keypoints from {model_path}")
    mesh = load_mesh(model_path)
    result = extract_keypoints(mesh, params)
    visible_result = extract_keypoints(mesh, params, camera=K, pose=pose) if K is not None else None

    write_keypoints_json(out_path, result.keypoints)
    click.echo(f"{len(result.keypoints)} keypoints -> {out_path}")
    if visible_result is not None:
        visible_path = _sibling(out_path, ".visible.json")
        write_keypoints_json(visible_path, visible_result.keypoints)
        click.echo(f"{len(visible_result.keypoints)} visible keypoints -> {visible_path}")
    write_manifest(out_path, "keypoints", params.model_dump(), started,
                   inputs=[model_path, camera_path, pose_path], seed=params.seed)


@click.command("heatmap")
@click.argument("keypoints_path", type=click.Path(dir_okay=False))
@click.option("--camera", "camera_path", type=click.Path(dir_okay=False), required=True)
@click.option("--pose", "pose_path", type=click.Path(dir_okay=False), required=True)
@click.option("--size", help="Heatmap size WxH; the camera image is rescaled onto it.")
@click.option("--sigma", type=click.FloatRange(min=0, min_open=True), help="Gaussian sigma in heatmap pixels.")
@click.option("--combine", type=click.Choice(["max", "sum"]), help="How overlapping Gaussians merge.")
@click.option("--raw", "write_raw_copy", is_flag=True, help="Also write <out stem>.raw (float32).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="16-bit PNG to write.")
@click.pass_context
def heatmap(ctx, keypoints_path, camera_path, pose_path, size, sigma, combine, write_raw_copy, out_path):
    """Render a keypoint JSON as a Gaussian heatmap PNG."""
    started = time.perf_counter()
    width, height = parse_size(size) if size else (None, None)
    params = build_settings(ctx, "heatmap", HeatmapParams, {
        "width": width, "height": height, "sigma": sigma, "combine": combine,
    })
    kps = read_keypoints_json(keypoints_path)
    K, pose = _camera_and_pose(camera_path, pose_path)
    grid = fit_intrinsics(K, params.width, params.height)
    result = render_heatmap(kps, pose, grid, params.width, params.height, params.sigma, params.combine)

    write_heatmap_png(out_path, result)
    if write_raw_copy:
        write_raw(_sibling(out_path, ".raw"), result.values)
    click.echo(f"{params.width}x{params.height} heatmap of {len(kps)} keypoints -> {out_path}")
    write_manifest(out_path, "heatmap", params.model_dump(), started,
                   inputs=[keypoints_path, camera_path, pose_path])


@click.command("render")
@click.argument("model_path", type=click.Path(dir_okay=False))
@click.option("--camera", "camera_path", type=click.Path(dir_okay=False), required=True)
@click.option("--pose", "pose_path", type=click.Path(dir_okay=False), required=True)
@click.option("--depth-scale", type=click.FloatRange(min=0, min_open=True), help="mm per PNG unit.")
@click.option("--raw", "write_raw_copy", is_flag=True, help="Also write <out stem>.raw (float32 mm).")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="16-bit depth PNG.")
@click.pass_context
def render(ctx, model_path, camera_path, pose_path, depth_scale, write_raw_copy, out_path):
    """Render the depth image of a PLY model in one view."""
    started = time.perf_counter()
    params = build_settings(ctx, "render", RenderParams, {
        "depth_scale": depth_scale, "write_raw": write_raw_copy or None,
    })
    mesh = load_mesh(model_path)
    K, pose = _camera_and_pose(camera_path, pose_path)
    depth = rasterize_depth(mesh, pose, K)
    try:
        write_depth_png(out_path, depth, params.depth_scale)
    except ValueError as e:
        raise PipelineError(str(e))
    if params.write_raw:
        write_raw(_sibling(out_path, ".raw"), depth.values)
    covered = int((depth.values > 0).sum())
    click.echo(f"{K.width}x{K.height} depth, {covered} covered pixels -> {out_path}")
    write_manifest(out_path, "render", params.model_dump(), started,
                   inputs=[model_path, camera_path, pose_path])
