"""affordkit: scalable multi-affordance detection on 3D pointclouds."""

__version__ = "0.1.0"

from .cloud import PointCloud, SpatialIndex, VoxelGrid, voxel_downsample, zero_mean
from .formats import parse_cloud, write_cloud
from .tensor import (
    AffordanceDescriptor,
    AffordanceKeypoint,
    BisectorSample,
    InteractionExample,
    ORIENTATION_BINS,
    augment_descriptor,
    build_descriptor,
    compute_bisector,
    compute_provenance,
    load_affordance_descriptor,
    sample_keypoints,
    save_affordance_descriptor,
)
from .agglomerate import (
    AgglomeratedDescriptor,
    KeypointSet,
    agglomerate,
    load_agglomerated_descriptor,
    save_agglomerated_descriptor,
)
from .saliency import (
    ProjectionTally,
    SaliencyRecord,
    backproject,
    fallback_saliency,
    load_saliency,
    optimize_descriptor,
    optimize_single,
    save_saliency,
)
from .detect import (
    BenchmarkReport,
    Detection,
    DetectorConfig,
    benchmark,
    detect_scene,
    sample_test_points,
    score_at_point,
    score_descriptor_at_point,
)
from .evaluate import (
    ICPResult,
    JudgmentSet,
    PRResult,
    Prediction,
    PredictionSet,
    Ranking,
    fit_bradley_terry,
    icp_score,
    precision_recall,
)
