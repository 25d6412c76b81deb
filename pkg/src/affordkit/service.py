"""HTTP service exposing the detection pipeline.

Every endpoint resolves a full PipelineConfig (config file, then
request overrides), runs exactly one module pipeline, writes the
artifacts plus a .config.json sidecar, and reports the resolved config
back. Errors use a typed envelope: usage (400), data (422),
internal (500); the CLI maps these onto exit codes 1, 2 and 3.
"""

from __future__ import annotations

import json

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import ValidationError as PydanticValidationError

from . import __version__, schemas
from .agglomerate import (
    agglomerate,
    load_agglomerated_descriptor,
    save_agglomerated_descriptor,
    write_manifest,
)
from .config import PipelineConfig, load_config, write_config_sidecar
from .detect import (
    benchmark,
    detect_scene,
    overlay_cloud,
    resolve_test_point_count,
    write_detections_csv,
)
from .errors import DataError, UsageError
from .evaluate import (
    fit_bradley_terry,
    icp_score,
    precision_recall,
    read_judgments_csv,
    read_predictions_csv,
    write_pr_curve_csv,
    write_ranking_csv,
)
from .formats import parse_cloud, write_cloud
from .saliency import backproject, load_saliency, optimize_descriptor, optimize_single
from .tensor import (
    InteractionExample,
    build_descriptor,
    dump_descriptor_text,
    load_affordance_descriptor,
    save_affordance_descriptor,
)

app = FastAPI(title="affordkit", version=__version__)


def _envelope(kind: str, message: str, status: int) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"type": kind, "message": message}})


@app.exception_handler(UsageError)
async def _usage_handler(request: Request, exc: UsageError):
    return _envelope("usage", str(exc), 400)


@app.exception_handler(DataError)
async def _data_handler(request: Request, exc: DataError):
    return _envelope("data", str(exc), 422)


@app.exception_handler(RequestValidationError)
async def _validation_handler(request: Request, exc: RequestValidationError):
    return _envelope("usage", str(exc), 400)


@app.exception_handler(PydanticValidationError)
async def _config_validation_handler(request: Request, exc: PydanticValidationError):
    return _envelope("usage", str(exc), 400)


@app.exception_handler(Exception)
async def _internal_handler(request: Request, exc: Exception):
    return _envelope("internal", f"{type(exc).__name__}: {exc}", 500)


def _resolve_config(config_path: str | None, **overrides) -> PipelineConfig:
    config = load_config(config_path) if config_path else PipelineConfig()
    updates = {k: v for k, v in overrides.items() if v is not None}
    if updates:
        config = config.model_copy(update=updates)
        config = PipelineConfig(**config.model_dump())  # re-validate
    return config


@app.get("/health", response_model=schemas.HealthResponse)
def health() -> schemas.HealthResponse:
    return schemas.HealthResponse(status="ok", version=__version__)


@app.post("/build", response_model=schemas.BuildResponse)
def build(req: schemas.BuildRequest) -> schemas.BuildResponse:
    config = _resolve_config(
        req.config_path,
        n_keypoints=req.n_keypoints,
        sampling_scheme=req.sampling_scheme,
        seed=req.seed,
        tensor_samples=req.tensor_samples,
        bisector_tolerance_m=req.bisector_tolerance_m,
        contact_bound_m=req.contact_bound_m,
    )
    pose = np.asarray(req.pose, dtype=np.float64) if req.pose is not None else None
    example = InteractionExample(
        affordance_id=req.affordance_id,
        label=req.label,
        query_object=parse_cloud(req.object_path),
        scene_patch=parse_cloud(req.scene_path),
        object_pose=pose,
        contact_bound=config.contact_bound_m,
    )
    descriptor = build_descriptor(
        example,
        n_keypoints=config.n_keypoints,
        scheme=config.sampling_scheme,
        seed=config.seed,
        tensor_samples=config.tensor_samples,
        tolerance=config.bisector_tolerance_m,
        config=config.resolved(),
    )
    save_affordance_descriptor(descriptor, req.out_path)
    write_config_sidecar(config, req.out_path)
    if req.text_dump_path:
        dump_descriptor_text(descriptor, req.text_dump_path)
    return schemas.BuildResponse(
        descriptor_path=req.out_path,
        keypoint_count=len(descriptor),
        keypoints_per_orientation=descriptor.keypoints_per_orientation,
        centroid_offset=[float(v) for v in descriptor.centroid_offset],
        config=config.resolved(),
    )


@app.post("/agglomerate", response_model=schemas.AgglomerateResponse)
def agglomerate_endpoint(req: schemas.AgglomerateRequest) -> schemas.AgglomerateResponse:
    config = _resolve_config(
        req.config_path, cell_size_m=req.cell_size_m, agglomeration_mode=req.mode
    )
    descriptors = [load_affordance_descriptor(p) for p in req.descriptor_paths]
    combined = agglomerate(
        descriptors, config.cell_size_m, mode=config.agglomeration_mode,
        config=config.resolved(),
    )
    save_agglomerated_descriptor(combined, req.out_path)
    manifest_path = req.out_path + ".manifest.txt"
    write_manifest(combined, manifest_path)
    write_config_sidecar(config, req.out_path)
    inputs = combined.member_count()
    kept = combined.kept_keypoint_count()
    return schemas.AgglomerateResponse(
        descriptor_path=req.out_path,
        manifest_path=manifest_path,
        centroid_count=len(combined),
        kept_keypoint_count=kept,
        input_keypoint_count=inputs,
        reduction_factor=inputs / kept if kept else float("inf"),
        config=config.resolved(),
    )


@app.post("/saliency-apply", response_model=schemas.SaliencyApplyResponse)
def saliency_apply(req: schemas.SaliencyApplyRequest) -> schemas.SaliencyApplyResponse:
    keep: float | int | None = None
    if req.keep_cells is not None and req.keep_fraction is not None:
        raise UsageError("give either keep_cells or keep_fraction, not both")
    if req.keep_cells is not None:
        keep = int(req.keep_cells)
    elif req.keep_fraction is not None:
        keep = float(req.keep_fraction)
    config = _resolve_config(
        req.config_path, cell_size_m=req.cell_size_m, keep=keep,
        weighted_projections=req.weighted,
    )
    keep = config.keep

    if (req.descriptor_path is None) == (req.single_descriptor_paths is None):
        raise UsageError("give exactly one of descriptor_path or single_descriptor_paths")

    if req.descriptor_path is not None:
        combined = load_agglomerated_descriptor(req.descriptor_path)
        records = load_saliency(req.saliency_path, directory=combined.directory)
        tally = backproject(records, combined, weighted=config.weighted_projections)
        optimized = optimize_descriptor(combined, tally, keep)
        cells_before = len(combined)
        missing = {int(k): int(v) for k, v in tally.missing.items()}
    else:
        singles = [load_affordance_descriptor(p) for p in req.single_descriptor_paths]
        directory = {d.affordance_id: d.label for d in singles}
        records = load_saliency(req.saliency_path, directory=directory)
        optimized = optimize_single(
            singles, records, config.cell_size_m, keep,
            weighted=config.weighted_projections,
        )
        cells_before = sum(len(agglomerate([d], config.cell_size_m)) for d in singles)
        missing = {}

    optimized.config = config.resolved()
    save_agglomerated_descriptor(optimized, req.out_path)
    write_manifest(optimized, req.out_path + ".manifest.txt")
    write_config_sidecar(config, req.out_path)
    return schemas.SaliencyApplyResponse(
        descriptor_path=req.out_path,
        cells_before=cells_before,
        cells_after=len(optimized),
        kept_keypoint_count=optimized.kept_keypoint_count(),
        missing_projections=missing,
        dropped_affordances=list(optimized.build_info.get("dropped_affordances", [])),
        config=config.resolved(),
    )


@app.post("/detect", response_model=schemas.DetectResponse)
def detect(req: schemas.DetectRequest) -> schemas.DetectResponse:
    config = _resolve_config(
        req.config_path,
        num_test_points=req.num_test_points,
        seed=req.seed,
        search_radius_m=req.search_radius_m,
    )
    scene = parse_cloud(req.scene_path)
    descriptor = load_agglomerated_descriptor(req.descriptor_path)
    detector = config.detector_config(pipeline=req.pipeline, threshold=req.threshold)
    detections = detect_scene(scene, descriptor, detector)
    scene_id = req.scene_id or req.scene_path
    write_detections_csv(detections, scene_id, req.csv_out)
    write_config_sidecar(config, req.csv_out)

    overlay_path = None
    if req.overlay_out:
        if not req.object_path:
            raise UsageError("overlay_out requires object_path")
        query_object = parse_cloud(req.object_path)
        overlay = overlay_cloud(detections, query_object, top=req.overlay_top)
        write_cloud(overlay, req.overlay_out, "ply-binary-le")
        overlay_path = req.overlay_out

    top = [
        schemas.DetectionModel(
            test_point_id=d.test_point_index,
            x=float(d.test_point[0]), y=float(d.test_point[1]), z=float(d.test_point[2]),
            affordance_id=d.affordance_id, label=d.label,
            orientation_id=d.orientation_id, score=d.score,
        )
        for d in detections[:10]
    ]
    n_points = resolve_test_point_count(scene, detector) if len(scene) else 0
    return schemas.DetectResponse(
        csv_path=req.csv_out,
        overlay_path=overlay_path,
        detection_count=len(detections),
        test_point_count=min(n_points, len(scene)),
        top=top,
        config=config.resolved(),
    )


@app.post("/bench", response_model=schemas.BenchResponse)
def bench(req: schemas.BenchRequest) -> schemas.BenchResponse:
    config = _resolve_config(req.config_path, seed=req.seed, search_radius_m=req.search_radius_m)
    scene = parse_cloud(req.scene_path)
    combined = load_agglomerated_descriptor(req.agglomerated_path)
    singles = [load_affordance_descriptor(p) for p in req.single_descriptor_paths]
    report = benchmark(
        scene, combined, singles,
        config=config.detector_config(),
        n_test_points=req.n_test_points,
    )
    report_path = None
    if req.report_out:
        with open(req.report_out, "w", encoding="utf-8") as f:
            f.write(report.as_text() + "\n")
            f.write(json.dumps(report.as_dict(), sort_keys=True) + "\n")
        write_config_sidecar(config, req.report_out)
        report_path = req.report_out
    return schemas.BenchResponse(**report.as_dict(), report_path=report_path,
                                 config=config.resolved())


@app.post("/eval/pr", response_model=schemas.EvalPRResponse)
def eval_pr(req: schemas.EvalPRRequest) -> schemas.EvalPRResponse:
    config = _resolve_config(req.config_path, match_radius_m=req.match_radius_m)
    pred = read_predictions_csv(req.predictions_csv, source="multi")
    truth = read_predictions_csv(req.truth_csv, source="single-baseline")
    radius = config.match_radius_m if config.match_radius_m is not None else config.cell_size_m
    result = precision_recall(pred, truth, radius)
    curve_path = None
    if req.curve_out:
        write_pr_curve_csv(result, req.curve_out)
        write_config_sidecar(config, req.curve_out)
        curve_path = req.curve_out
    return schemas.EvalPRResponse(
        status=result.status,
        auc=result.auc,
        points=len(result.thresholds),
        curve_path=curve_path,
        config=config.resolved(),
    )


@app.post("/eval/bt", response_model=schemas.EvalBTResponse)
def eval_bt(req: schemas.EvalBTRequest) -> schemas.EvalBTResponse:
    judgments = read_judgments_csv(req.judgments_csv)
    ranking = fit_bradley_terry(judgments, tol=req.tol, max_iter=req.max_iter)
    ranking_path = None
    if req.ranking_out:
        write_ranking_csv(ranking, req.ranking_out)
        ranking_path = req.ranking_out
    return schemas.EvalBTResponse(
        strengths={str(k): v for k, v in ranking.strengths.items()},
        ordering=[str(i) for i in ranking.ordering()],
        log_likelihood=ranking.log_likelihood,
        iterations=ranking.iterations,
        converged=ranking.converged,
        component_count=len(ranking.components),
        regularized=ranking.regularized,
        ranking_path=ranking_path,
    )


@app.post("/eval/icp", response_model=schemas.EvalICPResponse)
def eval_icp(req: schemas.EvalICPRequest) -> schemas.EvalICPResponse:
    template = parse_cloud(req.template_path)
    candidate = parse_cloud(req.candidate_path)
    result = icp_score(template, candidate, max_iter=req.max_iter, tol=req.tol)
    return schemas.EvalICPResponse(
        transform=[[float(v) for v in row] for row in result.transform],
        residual_m=result.residual,
        score=result.score,
        converged=result.converged,
        iterations=result.iterations,
    )
