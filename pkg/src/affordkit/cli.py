"""Command-line client for the detection service.

Each subcommand posts one request to the HTTP service and prints the
JSON response. Without --server the app runs in-process over an ASGI
transport, so every command works offline against local files; with
--server requests go to a running instance and paths refer to that
host's filesystem.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import asyncio
import json
import sys

import click
import httpx

from . import __version__

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

_STATUS_EXIT = {400: EXIT_USAGE, 422: EXIT_DATA, 500: EXIT_INTERNAL}


async def _request(server: str | None, path: str, body: dict) -> httpx.Response:
    if server:
        transport = None
        base_url = server
    else:
        from .service import app

        transport = httpx.ASGITransport(app=app)
        base_url = "http://affordkit.local"
    async with httpx.AsyncClient(transport=transport, base_url=base_url,
                                 timeout=3600.0) as client:
        return await client.post(path, json=body)


def _post(ctx: click.Context, path: str, payload: dict) -> dict:
    body = {k: v for k, v in payload.items() if v is not None}
    try:
        response = asyncio.run(_request(ctx.obj.get("server"), path, body))
    except httpx.HTTPError as exc:
        click.echo(f"error: cannot reach service: {exc}", err=True)
        sys.exit(EXIT_INTERNAL)
    if response.status_code != 200:
        try:
            error = response.json().get("error", {})
            message = error.get("message", response.text)
        except json.JSONDecodeError:
            message = response.text
        click.echo(f"error: {message}", err=True)
        sys.exit(_STATUS_EXIT.get(response.status_code, EXIT_INTERNAL))
    doc = response.json()
    click.echo(json.dumps(doc, indent=1, sort_keys=True))
    return doc


@click.group()
@click.option("--server", default=None, metavar="URL",
              help="Base URL of a running service; default runs in-process.")
@click.version_option(version=__version__)
@click.pass_context
def main(ctx: click.Context, server: str | None) -> None:
    """Multi-affordance detection pipeline."""
    ctx.ensure_object(dict)
    ctx.obj["server"] = server


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host: str, port: int) -> None:
    """Run the HTTP service."""
    import uvicorn

    uvicorn.run("affordkit.service:app", host=host, port=port)


@main.command()
@click.option("--object", "object_path", required=True, type=click.Path(),
              help="Query object cloud (PLY/PCD).")
@click.option("--scene", "scene_path", required=True, type=click.Path(),
              help="Scene patch cloud (PLY/PCD).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--affordance-id", required=True, type=int)
@click.option("--label", default="", help="Verb-object pair, e.g. Place-book.")
@click.option("--pose", "pose_path", type=click.Path(),
              help="JSON file with a 4x4 object-to-scene transform.")
@click.option("--keypoints", "n_keypoints", type=int, help="Keypoints per orientation.")
@click.option("--scheme", "sampling_scheme", type=click.Choice(["uniform", "proximity"]))
@click.option("--seed", type=int)
@click.option("--tensor-samples", type=int)
@click.option("--config", "config_path", type=click.Path())
@click.option("--text-dump", "text_dump_path", type=click.Path())
@click.pass_context
def build(ctx, object_path, scene_path, out_path, affordance_id, label, pose_path,
          n_keypoints, sampling_scheme, seed, tensor_samples, config_path, text_dump_path):
    """Build a single-affordance descriptor from one interaction example."""
    pose = None
    if pose_path:
        with open(pose_path) as f:
            pose = json.load(f)
    _post(ctx, "/build", {
        "object_path": object_path, "scene_path": scene_path, "out_path": out_path,
        "affordance_id": affordance_id, "label": label, "pose": pose,
        "n_keypoints": n_keypoints, "sampling_scheme": sampling_scheme, "seed": seed,
        "tensor_samples": tensor_samples, "config_path": config_path,
        "text_dump_path": text_dump_path,
    })


@main.command()
@click.argument("descriptors", nargs=-1, required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--cell-size", "cell_size_m", type=float, help="Grid cell edge in meters.")
@click.option("--mode", type=click.Choice(["closest", "all"]))
@click.option("--config", "config_path", type=click.Path())
@click.pass_context
def agglomerate(ctx, descriptors, out_path, cell_size_m, mode, config_path):
    """Merge single-affordance descriptors into one multi-affordance grid."""
    _post(ctx, "/agglomerate", {
        "descriptor_paths": list(descriptors), "out_path": out_path,
        "cell_size_m": cell_size_m, "mode": mode, "config_path": config_path,
    })


@main.command("saliency-apply")
@click.option("--saliency", "saliency_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--descriptor", "descriptor_path", type=click.Path(),
              help="Agglomerated descriptor (combined variant).")
@click.option("--single", "single_descriptor_paths", multiple=True, type=click.Path(),
              help="Single descriptors for the per-affordance variant; repeatable.")
@click.option("--cell-size", "cell_size_m", type=float)
@click.option("--keep-fraction", type=float, help="Keep cells covering this tally mass.")
@click.option("--keep-cells", type=int, help="Keep this many cells per affordance.")
@click.option("--weighted/--unweighted", "weighted", default=None,
              help="Weight projections by activation strength.")
@click.option("--config", "config_path", type=click.Path())
@click.pass_context
def saliency_apply(ctx, saliency_path, out_path, descriptor_path, single_descriptor_paths,
                   cell_size_m, keep_fraction, keep_cells, weighted, config_path):
    """Back-project salient points and prune the descriptor."""
    _post(ctx, "/saliency-apply", {
        "saliency_path": saliency_path, "out_path": out_path,
        "descriptor_path": descriptor_path,
        "single_descriptor_paths": list(single_descriptor_paths) or None,
        "cell_size_m": cell_size_m, "keep_fraction": keep_fraction,
        "keep_cells": keep_cells, "weighted": weighted, "config_path": config_path,
    })


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--descriptor", "descriptor_path", required=True, type=click.Path())
@click.option("--csv-out", required=True, type=click.Path())
@click.option("--scene-id", default=None)
@click.option("--pipeline", type=click.Choice(["agglomeration", "saliency"]),
              default="agglomeration", show_default=True)
@click.option("--threshold", type=float, help="Override the pipeline threshold.")
@click.option("--test-points", "num_test_points", type=int)
@click.option("--seed", type=int)
@click.option("--search-radius", "search_radius_m", type=float)
@click.option("--overlay-out", type=click.Path())
@click.option("--object", "object_path", type=click.Path(),
              help="Training object cloud, required with --overlay-out.")
@click.option("--overlay-top", default=1, show_default=True)
@click.option("--config", "config_path", type=click.Path())
@click.pass_context
def detect(ctx, scene_path, descriptor_path, csv_out, scene_id, pipeline, threshold,
           num_test_points, seed, search_radius_m, overlay_out, object_path,
           overlay_top, config_path):
    """Detect affordances in a scene and export a CSV (and overlay cloud)."""
    _post(ctx, "/detect", {
        "scene_path": scene_path, "descriptor_path": descriptor_path, "csv_out": csv_out,
        "scene_id": scene_id, "pipeline": pipeline, "threshold": threshold,
        "num_test_points": num_test_points, "seed": seed,
        "search_radius_m": search_radius_m, "overlay_out": overlay_out,
        "object_path": object_path, "overlay_top": overlay_top,
        "config_path": config_path,
    })


@main.command()
@click.option("--scene", "scene_path", required=True, type=click.Path())
@click.option("--agglomerated", "agglomerated_path", required=True, type=click.Path())
@click.option("--single", "single_descriptor_paths", multiple=True, required=True,
              type=click.Path(), help="Single descriptors for the sequential baseline.")
@click.option("--test-points", "n_test_points", default=100, show_default=True)
@click.option("--seed", type=int)
@click.option("--search-radius", "search_radius_m", type=float)
@click.option("--report-out", type=click.Path())
@click.option("--config", "config_path", type=click.Path())
@click.pass_context
def bench(ctx, scene_path, agglomerated_path, single_descriptor_paths, n_test_points,
          seed, search_radius_m, report_out, config_path):
    """Time one agglomerated query against sequential single queries."""
    _post(ctx, "/bench", {
        "scene_path": scene_path, "agglomerated_path": agglomerated_path,
        "single_descriptor_paths": list(single_descriptor_paths),
        "n_test_points": n_test_points, "seed": seed,
        "search_radius_m": search_radius_m, "report_out": report_out,
        "config_path": config_path,
    })


@main.command("eval-pr")
@click.option("--predictions", "predictions_csv", required=True, type=click.Path())
@click.option("--truth", "truth_csv", required=True, type=click.Path())
@click.option("--match-radius", "match_radius_m", type=float,
              help="Spatial match tolerance; defaults to the cell size.")
@click.option("--curve-out", type=click.Path())
@click.option("--config", "config_path", type=click.Path())
@click.pass_context
def eval_pr(ctx, predictions_csv, truth_csv, match_radius_m, curve_out, config_path):
    """Precision-recall curve and AUC of predictions against a reference set."""
    _post(ctx, "/eval/pr", {
        "predictions_csv": predictions_csv, "truth_csv": truth_csv,
        "match_radius_m": match_radius_m, "curve_out": curve_out,
        "config_path": config_path,
    })


@main.command("eval-bt")
@click.option("--judgments", "judgments_csv", required=True, type=click.Path(),
              help="CSV with columns option_a, option_b, winner.")
@click.option("--tol", default=1e-10, show_default=True)
@click.option("--max-iter", default=10_000, show_default=True)
@click.option("--ranking-out", type=click.Path())
@click.pass_context
def eval_bt(ctx, judgments_csv, tol, max_iter, ranking_out):
    """Fit pairwise-preference strengths and rank the options."""
    _post(ctx, "/eval/bt", {
        "judgments_csv": judgments_csv, "tol": tol, "max_iter": max_iter,
        "ranking_out": ranking_out,
    })


@main.command("eval-icp")
@click.option("--template", "template_path", required=True, type=click.Path())
@click.option("--candidate", "candidate_path", required=True, type=click.Path())
@click.option("--max-iter", default=60, show_default=True)
@click.option("--tol", default=1e-9, show_default=True)
@click.pass_context
def eval_icp(ctx, template_path, candidate_path, max_iter, tol):
    """Rigid-alignment baseline: transform, residual and score."""
    _post(ctx, "/eval/icp", {
        "template_path": template_path, "candidate_path": candidate_path,
        "max_iter": max_iter, "tol": tol,
    })


def run() -> int:
    """Entry point with the documented exit-code mapping."""
    try:
        main(standalone_mode=False)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return EXIT_USAGE
    except click.ClickException as exc:
        exc.show()
        return EXIT_USAGE
    except click.exceptions.Abort:
        return EXIT_USAGE
    except SystemExit as exc:
        return int(exc.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(run())
