# salientpose/commands/eval_commands.py
import logging
import os
import time

import click

from ..bopio import evaluate_dataset, read_categories, read_results_csv
from ..file_utils import staged_directory, write_json
from ..metrics import write_summary_csv
from ..models import EvalConfig
from .common import build_settings, write_manifest

# Configure logging
logger = logging.getLogger(__name__)


def _format_cell(value):
    return "n/a" if value is None else f"{value:.3f}"


@click.command("eval")
@click.option("--dataset", "dataset_root", type=click.Path(file_okay=False), required=True)
@click.option("--results", "results_path", type=click.Path(dir_okay=False), required=True,
              help="bop19 results CSV.")
@click.option("--categories", "categories_path", type=click.Path(dir_okay=False),
              help="JSON mapping obj_id to Can, Household or Industry.")
@click.option("--grid", type=click.Choice(["bop19"]), help="Threshold grid.")
@click.option("--models", "models_dir", type=click.Path(file_okay=False), help="Model directory (default <dataset>/models).")
@click.option("--vsd-depth", "vsd_depth_source", type=click.Choice(["gt_render", "scene"]),
              help="Depth the VSD visibility masks are tested against.")
@click.option("--matching", type=click.Choice(["greedy", "hungarian"]))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_context
def evaluate(ctx, dataset_root, results_path, categories_path, grid, models_dir, vsd_depth_source, matching, out_dir):
    """Score a bop19 results CSV against a BOP dataset."""
    started = time.perf_counter()
    params = build_settings(ctx, "eval", EvalConfig, {
        "grid": grid, "vsd_depth_source": vsd_depth_source, "matching": matching,
    })
    results = read_results_csv(results_path)
    categories = read_categories(categories_path) if categories_path else None
    evaluation = evaluate_dataset(dataset_root, results, categories, params, models_dir)

    # Both summaries appear together or not at all.
    with staged_directory(out_dir) as staging:
        write_json(os.path.join(staging, "summary.json"), evaluation.as_dict())
        write_summary_csv(os.path.join(staging, "summary.csv"), evaluation.table())
    for name, summary in evaluation.table().items():
        row = summary.as_row()
        click.echo(f"{name:<10} AR {_format_cell(row['AR'])}  VSD {_format_cell(row['VSD'])}  "
                   f"MSSD {_format_cell(row['MSSD'])}  MSPD {_format_cell(row['MSPD'])}")
    write_manifest(out_dir, "eval", params.model_dump(), started,
                   inputs=[results_path, categories_path])
