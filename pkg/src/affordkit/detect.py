"""Affordance detection: score descriptors at scene locations.

At a test point t the descriptor is aligned by translating its origin
to t. Every cell centroid then looks up its nearest scene point inside
the search ball around t, giving a test vector v_t from the aligned
centroid to that point. Each stored keypoint contributes
exp(-delta^2 / (2 w^2)) with delta = |v_t - p| / |p|, and the score of
an (affordance, orientation) group is the mean contribution over all
its keypoints, so scores live in [0, 1] and hit 1 only on an exact
reproduction of the training geometry.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .agglomerate import AgglomeratedDescriptor
from .cloud import PointCloud, SpatialIndex
from .errors import DataError, UsageError
from .tensor import AffordanceDescriptor, ORIENTATION_BINS, orientation_rotation

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = {"agglomeration": 0.7, "saliency": 0.5}


@dataclass
class DetectorConfig:
    """Detection parameters; thresholds are keyed by pipeline."""

    pipeline: str = "agglomeration"
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))
    threshold: float | None = None  # explicit override of the pipeline default
    num_test_points: int | None = None
    test_point_density: float = 50.0  # test points per m^2 of scene footprint
    search_radius: float | None = None  # None: half the descriptor bbox diagonal
    seed: int = 0

    def __post_init__(self):
        for name, value in self.thresholds.items():
            if not 0.0 <= value <= 1.0:
                raise UsageError(f"threshold for {name!r} must be in [0, 1], got {value}")
        if self.threshold is not None and not 0.0 <= self.threshold <= 1.0:
            raise UsageError(f"threshold must be in [0, 1], got {self.threshold}")
        if self.pipeline not in self.thresholds:
            raise UsageError(
                f"unknown pipeline {self.pipeline!r}; expected one of {sorted(self.thresholds)}"
            )

    def effective_threshold(self) -> float:
        if self.threshold is not None:
            return self.threshold
        return self.thresholds[self.pipeline]


@dataclass
class ScoreResult:
    """Scores of one test point, one row per (affordance, orientation)."""

    affordance_ids: np.ndarray  # (G,)
    orientation_ids: np.ndarray  # (G,)
    scores: np.ndarray  # (G,) in [0, 1]
    nn_scene_indices: np.ndarray  # (C,) global scene index per centroid, -1 if none
    nn_distances: np.ndarray  # (C,)
    test_vectors: np.ndarray  # (C, 3)

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {
            (int(k), int(o)): float(s)
            for k, o, s in zip(self.affordance_ids, self.orientation_ids, self.scores)
        }

    def best_per_affordance(self) -> dict[int, tuple[int, float]]:
        """argmax orientation per affordance; ties go to the lowest bin."""
        best: dict[int, tuple[int, float]] = {}
        order = np.lexsort((self.orientation_ids, self.affordance_ids))
        for g in order:
            k, o, s = int(self.affordance_ids[g]), int(self.orientation_ids[g]), float(self.scores[g])
            if k not in best or s > best[k][1]:
                best[k] = (o, s)
        return best


@dataclass
class Detection:
    """One above-threshold hit with its recovered object pose."""

    test_point: np.ndarray
    test_point_index: int
    affordance_id: int
    label: str
    orientation_id: int
    score: float
    object_pose: np.ndarray  # 4x4, training object frame -> scene frame


def sample_test_point_indices(scene: PointCloud, n: int, seed: int = 0) -> np.ndarray:
    """Indices of n scene points drawn uniformly without replacement.

    Asking for more points than the scene holds falls back to the
    exhaustive set (a random permutation) with a notice.
    """
    if not len(scene):
        raise DataError("cannot sample test points from an empty scene")
    if n < 1:
        raise UsageError("test point count must be >= 1")
    rng = np.random.default_rng(seed)
    if n > len(scene):
        log.info("requested %d test points from a %d-point scene; using all points", n, len(scene))
        n = len(scene)
    return rng.choice(len(scene), size=n, replace=False)


def sample_test_points(scene: PointCloud, n: int, seed: int = 0) -> np.ndarray:
    """Coordinates of n uniformly sampled scene points."""
    return scene.points[sample_test_point_indices(scene, n, seed)]


def resolve_test_point_count(scene: PointCloud, config: DetectorConfig) -> int:
    """Explicit count, or footprint-proportional density."""
    if config.num_test_points is not None:
        return config.num_test_points
    lo, hi = scene.bounds()
    area = max(float((hi[0] - lo[0]) * (hi[1] - lo[1])), 0.0)
    return max(1, round(config.test_point_density * area))


def _search_radius(descriptor, config: DetectorConfig) -> float:
    if config.search_radius is not None:
        if config.search_radius <= 0:
            raise UsageError("search radius must be positive")
        return config.search_radius
    diag = descriptor.bounding_box_diagonal()
    if diag > 0:
        return diag / 2.0
    # Degenerate single-point descriptors still need a usable ball.
    return getattr(descriptor, "cell_size", 0.1) or 0.1


def entry_contribution(test_vectors, provenances, weights, pnorm=None):
    """Per-keypoint contribution exp(-delta^2 / (2 w^2)).

    delta is the provenance-relative test-vector error
    |v_t - p| / |p|; the weight w is the kernel's sigma.
    """
    if pnorm is None:
        pnorm = np.linalg.norm(provenances, axis=1)
    diff = test_vectors - provenances
    delta = np.sqrt((diff * diff).sum(axis=1)) / pnorm
    return np.exp(-(delta * delta) / (2.0 * weights * weights))


def _local_lookup(scene_index: SpatialIndex, t, radius: float, queries: np.ndarray):
    """Restricted 1-NN: nearest scene point within the ball around t.

    Returns (global scene indices, distances, targets) or None when the
    ball is empty. When the ball spans the whole cloud the prebuilt
    global tree answers directly.
    """
    local = scene_index.points_within(t, radius)
    if len(local) == 0:
        return None
    if len(local) == len(scene_index):
        dist, gi = scene_index.query_batch(queries)
        return gi.astype(np.int64), dist, scene_index.cloud.points[gi]
    local_pts = scene_index.cloud.points[local]
    dist, li = cKDTree(local_pts).query(queries)
    return local[li].astype(np.int64), dist, local_pts[li]


def _empty_result(aff, orient, n_anchors) -> ScoreResult:
    keys = aff * ORIENTATION_BINS + orient
    uniq = np.unique(keys)
    return ScoreResult(
        affordance_ids=uniq // ORIENTATION_BINS,
        orientation_ids=uniq % ORIENTATION_BINS,
        scores=np.zeros(len(uniq)),
        nn_scene_indices=np.full(n_anchors, -1, dtype=np.int64),
        nn_distances=np.full(n_anchors, np.inf),
        test_vectors=np.zeros((n_anchors, 3)),
    )


def score_at_point(
    scene_index: SpatialIndex,
    descriptor: AgglomeratedDescriptor,
    t,
    config: DetectorConfig | None = None,
) -> ScoreResult:
    """Score every (affordance, orientation) of the descriptor at t.

    Nearest-neighbor lookups are restricted to the ball of the search
    radius around t; when that ball is empty every centroid misses and
    all scores are 0.
    """
    config = config or DetectorConfig()
    flat = descriptor.flattened()
    t = np.asarray(t, dtype=np.float64)
    centroids = flat["centroids"] + t

    found = _local_lookup(scene_index, t, _search_radius(descriptor, config), centroids)
    if found is None:
        return _empty_result(flat["aff"], flat["orient"], len(centroids))
    nn_idx, dist, targets = found
    test_vectors = targets - centroids
    contrib = entry_contribution(test_vectors[flat["cell"]], flat["prov"], flat["w"],
                                 pnorm=flat["pnorm"])
    sums = np.bincount(flat["group_index"], weights=contrib,
                       minlength=len(flat["group_sizes"]))
    return ScoreResult(
        affordance_ids=flat["group_aff"], orientation_ids=flat["group_orient"],
        scores=sums / flat["group_sizes"],
        nn_scene_indices=nn_idx, nn_distances=dist, test_vectors=test_vectors,
    )


def score_descriptor_at_point(
    scene_index: SpatialIndex,
    descriptor: AffordanceDescriptor,
    t,
    config: DetectorConfig | None = None,
) -> ScoreResult:
    """Score a raw single-affordance descriptor at t.

    Every keypoint anchors its own nearest-neighbor lookup, which is
    the pre-agglomeration query path and the sequential baseline in
    benchmarks.
    """
    config = config or DetectorConfig()
    t = np.asarray(t, dtype=np.float64)
    positions = descriptor.positions + t
    aff = np.full(len(descriptor), descriptor.affordance_id, dtype=np.int64)
    orient = descriptor.orientation_ids

    found = _local_lookup(scene_index, t, _search_radius(descriptor, config), positions)
    if found is None:
        return _empty_result(aff, orient, len(positions))
    nn_idx, dist, targets = found
    test_vectors = targets - positions
    contrib = entry_contribution(test_vectors, descriptor.provenances, descriptor.weights)
    sums = np.bincount(orient, weights=contrib, minlength=ORIENTATION_BINS)
    sizes = np.bincount(orient, minlength=ORIENTATION_BINS)
    present = sizes > 0
    return ScoreResult(
        affordance_ids=np.full(present.sum(), descriptor.affordance_id, dtype=np.int64),
        orientation_ids=np.flatnonzero(present).astype(np.int64),
        scores=sums[present] / sizes[present],
        nn_scene_indices=nn_idx, nn_distances=dist, test_vectors=test_vectors,
    )


def recover_pose(t, orientation_id: int, centroid_offset) -> np.ndarray:
    """Pose placing the stored training object at the detection.

    A training-frame object point p lands at R (p - offset) + t, with R
    the orientation-bin rotation about +z.
    """
    rot = orientation_rotation(orientation_id)
    pose = np.eye(4)
    pose[:3, :3] = rot
    pose[:3, 3] = np.asarray(t, dtype=np.float64) - rot @ np.asarray(centroid_offset)
    return pose


def detect_scene(
    scene: PointCloud,
    descriptor: AgglomeratedDescriptor,
    config: DetectorConfig | None = None,
) -> list[Detection]:
    """All above-threshold detections, best score first.

    Each (test point, affordance) pair contributes at most one
    detection, at its best-scoring orientation bin (ties to the lowest
    bin). Output order is score descending, then (test point index,
    affordance id) ascending.
    """
    config = config or DetectorConfig()
    if not len(scene):
        return []
    threshold = config.effective_threshold()
    index = SpatialIndex(scene)
    n = resolve_test_point_count(scene, config)
    indices = sample_test_point_indices(scene, n, config.seed)

    detections: list[Detection] = []
    for ti in indices:
        t = scene.points[ti]
        result = score_at_point(index, descriptor, t, config)
        for k, (o, s) in result.best_per_affordance().items():
            if s >= threshold:
                detections.append(Detection(
                    test_point=t,
                    test_point_index=int(ti),
                    affordance_id=k,
                    label=descriptor.directory.get(k, ""),
                    orientation_id=o,
                    score=s,
                    object_pose=recover_pose(t, o, descriptor.centroid_offsets[k]),
                ))
    detections.sort(key=lambda d: (-d.score, d.test_point_index, d.affordance_id))
    return detections


@dataclass
class BenchmarkReport:
    ms_per_point_agglomerated: float
    ms_per_point_sequential: float
    speedup: float
    n_test_points: int
    affordance_count: int
    centroid_count: int
    agglomerated_keypoints: int
    sequential_keypoints: int

    def as_dict(self) -> dict:
        return {
            "ms_per_point_agglomerated": self.ms_per_point_agglomerated,
            "ms_per_point_sequential": self.ms_per_point_sequential,
            "speedup": self.speedup,
            "n_test_points": self.n_test_points,
            "affordance_count": self.affordance_count,
            "centroid_count": self.centroid_count,
            "agglomerated_keypoints": self.agglomerated_keypoints,
            "sequential_keypoints": self.sequential_keypoints,
        }

    def as_text(self) -> str:
        lines = [
            f"test points               {self.n_test_points}",
            f"affordances               {self.affordance_count}",
            f"centroids (agglomerated)  {self.centroid_count}",
            f"keypoints (agglomerated)  {self.agglomerated_keypoints}",
            f"keypoints (sequential)    {self.sequential_keypoints}",
            f"ms/test-point agglomerated {self.ms_per_point_agglomerated:.3f}",
            f"ms/test-point sequential   {self.ms_per_point_sequential:.3f}",
            f"speedup                    {self.speedup:.2f}x",
        ]
        return "\n".join(lines)


def benchmark(
    scene: PointCloud,
    agglomerated: AgglomeratedDescriptor,
    singles: list[AffordanceDescriptor],
    config: DetectorConfig | None = None,
    n_test_points: int = 100,
) -> BenchmarkReport:
    """Time one multi-affordance query against sequential single queries."""
    config = config or DetectorConfig()
    agg_ids = set(agglomerated.directory)
    single_ids = {d.affordance_id for d in singles}
    if agg_ids != single_ids:
        raise DataError(
            f"affordance sets differ: agglomerated {sorted(agg_ids)} vs singles {sorted(single_ids)}"
        )
    if not len(scene):
        raise DataError("benchmark needs a non-empty scene")

    index = SpatialIndex(scene)
    indices = sample_test_point_indices(scene, min(n_test_points, len(scene)), config.seed)
    points = scene.points[indices]

    # Warm-up pass keeps one-time allocation out of the timings.
    score_at_point(index, agglomerated, points[0], config)
    for d in singles:
        score_descriptor_at_point(index, d, points[0], config)

    start = time.perf_counter()
    for t in points:
        score_at_point(index, agglomerated, t, config)
    agg_ms = (time.perf_counter() - start) * 1000.0 / len(points)

    start = time.perf_counter()
    for t in points:
        for d in singles:
            score_descriptor_at_point(index, d, t, config)
    seq_ms = (time.perf_counter() - start) * 1000.0 / len(points)

    return BenchmarkReport(
        ms_per_point_agglomerated=agg_ms,
        ms_per_point_sequential=seq_ms,
        speedup=seq_ms / agg_ms if agg_ms > 0 else float("inf"),
        n_test_points=len(points),
        affordance_count=len(agg_ids),
        centroid_count=len(agglomerated),
        agglomerated_keypoints=agglomerated.kept_keypoint_count(),
        sequential_keypoints=sum(len(d) for d in singles),
    )


DETECTION_CSV_COLUMNS = ("scene", "test_point_id", "x", "y", "z",
                         "affordance_id", "label", "orientation_id", "score")


def write_detections_csv(detections: list[Detection], scene_id: str, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(DETECTION_CSV_COLUMNS)
        for d in detections:
            writer.writerow([
                scene_id, d.test_point_index,
                repr(float(d.test_point[0])), repr(float(d.test_point[1])),
                repr(float(d.test_point[2])),
                d.affordance_id, d.label, d.orientation_id, repr(float(d.score)),
            ])


def overlay_cloud(detections: list[Detection], query_object: PointCloud,
                  top: int = 1) -> PointCloud:
    """Query object transformed by the pose of each of the top detections."""
    if not detections:
        return PointCloud(np.zeros((0, 3)))
    parts = []
    for d in detections[:top]:
        placed = query_object.transformed(d.object_pose[:3, :3], d.object_pose[:3, 3])
        parts.append(placed.points)
    return PointCloud(np.vstack(parts), frame_id="scene")
