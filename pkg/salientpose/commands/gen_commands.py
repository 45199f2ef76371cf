# salientpose/commands/gen_commands.py
import logging
import os
import time

import click

from ..exceptions import MissingModelError
from ..file_utils import allowed_file
from ..geometry import load_mesh
from ..models import GenConfig
from ..scenegen import generate_dataset, load_models_dir
from .common import build_settings, write_manifest

# Configure logging
logger = logging.getLogger(__name__)


def _load_distractors(directory):
    paths = [os.path.join(directory, name) for name in sorted(os.listdir(directory)) if allowed_file(name, {"ply"})]
    if not paths:
        raise MissingModelError(f"no .ply distractor meshes in {directory}")
    return paths, [load_mesh(path) for path in paths]


@click.command("gen")
@click.option("--mode", type=click.Choice(["miso", "simo"], case_sensitive=False),
              help="MiSo: instances of one object; SiMo: distinct objects.")
@click.option("--models", "models_dir", type=click.Path(file_okay=False), required=True,
              help="Directory with obj_NNNNNN.ply models.")
@click.option("--scenes", "scene_count", type=click.IntRange(min=1), help="Number of scenes.")
@click.option("--cams", "cameras_per_scene", type=click.IntRange(min=1), help="Cameras per scene.")
@click.option("--seed", type=int)
@click.option("--max-instances", type=click.IntRange(min=1, max=10))
@click.option("--distractors", "distractors_dir", type=click.Path(file_okay=False),
              help="Directory of .ply meshes placed as occluders.")
@click.option("--distractor-count", type=click.IntRange(min=0), help="Distractors per scene (default 1 with --distractors).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def gen(ctx, mode, models_dir, scene_count, cameras_per_scene, seed, max_instances,
        distractors_dir, distractor_count, out_dir):
    """Generate MiSo / SiMo scenes with BOP ground truth."""
    started = time.perf_counter()
    params = build_settings(ctx, "gen", GenConfig, {
        "mode": mode,
        "scene_count": scene_count,
        "cameras_per_scene": cameras_per_scene,
        "seed": seed,
        "max_instances": max_instances,
        "distractor_count": distractor_count,
    })
    distractor_paths, distractors = _load_distractors(distractors_dir) if distractors_dir else ([], [])
    if distractors and params.distractor_count == 0:
        params = params.model_copy(update={"distractor_count": 1})
        logger.info("Distractor meshes given without a count; placing 1 per scene")

    objects = load_models_dir(models_dir)
    logger.info(f"Loaded {len(objects)} models from {models_dir}")
    layouts = generate_dataset(objects, params, out_dir, distractors)

    images = len(layouts) * params.cameras_per_scene
    instances = sum(len(layout.instances) for layout in layouts)
    click.echo(f"{len(layouts)} {params.mode} scenes, {images} images, {instances} instances -> {out_dir}")
    model_files = [os.path.join(models_dir, f"obj_{obj_id:06d}.ply") for obj_id, _ in objects]
    write_manifest(out_dir, "gen", params.model_dump(), started,
                   inputs=model_files + distractor_paths, seed=params.seed)
