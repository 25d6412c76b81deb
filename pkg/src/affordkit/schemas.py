"""Request and response models of the HTTP service.

Paths in requests refer to the service host's filesystem; the CLI runs
the app in-process by default, so paths behave like local paths there.
"""

from __future__ import annotations

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str
    version: str


class BuildRequest(BaseModel):
    object_path: str
    scene_path: str
    out_path: str
    affordance_id: int = Field(ge=0)
    label: str = ""
    pose: list[list[float]] | None = None  # 4x4 row-major, default identity
    n_keypoints: int | None = None
    sampling_scheme: str | None = None
    seed: int | None = None
    tensor_samples: int | None = None
    bisector_tolerance_m: float | None = None
    contact_bound_m: float | None = None
    config_path: str | None = None
    text_dump_path: str | None = None


class BuildResponse(BaseModel):
    descriptor_path: str
    keypoint_count: int
    keypoints_per_orientation: int
    centroid_offset: list[float]
    config: dict


class AgglomerateRequest(BaseModel):
    descriptor_paths: list[str]
    out_path: str
    cell_size_m: float | None = None
    mode: str | None = None
    config_path: str | None = None


class AgglomerateResponse(BaseModel):
    descriptor_path: str
    manifest_path: str
    centroid_count: int
    kept_keypoint_count: int
    input_keypoint_count: int
    reduction_factor: float
    config: dict


class SaliencyApplyRequest(BaseModel):
    saliency_path: str
    out_path: str
    descriptor_path: str | None = None  # combined variant
    single_descriptor_paths: list[str] | None = None  # per-affordance variant
    cell_size_m: float | None = None
    keep_fraction: float | None = None
    keep_cells: int | None = None
    weighted: bool | None = None
    config_path: str | None = None


class SaliencyApplyResponse(BaseModel):
    descriptor_path: str
    cells_before: int
    cells_after: int
    kept_keypoint_count: int
    missing_projections: dict[int, int]
    dropped_affordances: list[int]
    config: dict


class DetectRequest(BaseModel):
    scene_path: str
    descriptor_path: str
    csv_out: str
    scene_id: str | None = None
    pipeline: str = "agglomeration"
    threshold: float | None = None
    num_test_points: int | None = None
    seed: int | None = None
    search_radius_m: float | None = None
    overlay_out: str | None = None
    object_path: str | None = None  # training object cloud for the overlay
    overlay_top: int = 1
    config_path: str | None = None


class DetectionModel(BaseModel):
    test_point_id: int
    x: float
    y: float
    z: float
    affordance_id: int
    label: str
    orientation_id: int
    score: float


class DetectResponse(BaseModel):
    csv_path: str
    overlay_path: str | None
    detection_count: int
    test_point_count: int
    top: list[DetectionModel]
    config: dict


class BenchRequest(BaseModel):
    scene_path: str
    agglomerated_path: str
    single_descriptor_paths: list[str]
    n_test_points: int = 100
    seed: int | None = None
    search_radius_m: float | None = None
    report_out: str | None = None
    config_path: str | None = None


class BenchResponse(BaseModel):
    ms_per_point_agglomerated: float
    ms_per_point_sequential: float
    speedup: float
    n_test_points: int
    affordance_count: int
    centroid_count: int
    agglomerated_keypoints: int
    sequential_keypoints: int
    report_path: str | None
    config: dict


class EvalPRRequest(BaseModel):
    predictions_csv: str
    truth_csv: str
    match_radius_m: float | None = None
    curve_out: str | None = None
    config_path: str | None = None


class EvalPRResponse(BaseModel):
    status: str
    auc: float | None
    points: int
    curve_path: str | None
    config: dict


class EvalBTRequest(BaseModel):
    judgments_csv: str
    tol: float = 1e-10
    max_iter: int = 10_000
    ranking_out: str | None = None


class EvalBTResponse(BaseModel):
    strengths: dict[str, float]
    ordering: list[str]
    log_likelihood: float
    iterations: int
    converged: bool
    component_count: int
    regularized: bool
    ranking_path: str | None


class EvalICPRequest(BaseModel):
    template_path: str
    candidate_path: str
    max_iter: int = 60
    tol: float = 1e-9


class EvalICPResponse(BaseModel):
    transform: list[list[float]]
    residual_m: float
    score: float
    converged: bool
    iterations: int


class ErrorEnvelope(BaseModel):
    type: str  # usage | data | internal
    message: str
