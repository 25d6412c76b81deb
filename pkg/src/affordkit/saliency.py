"""Salient-point ingestion, back-projection and descriptor compression.

Salient scene points (from the trainer's interchange files or the
built-in detection-driven fallback) are projected into the cells of an
agglomerated descriptor; cells that collect the most projections per
affordance survive, the rest are pruned. The interchange file is JSON
with a schema header; see load_saliency for the exact shape.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .agglomerate import AgglomeratedDescriptor, Cell, CellEntry, KeypointSet, agglomerate
from .cloud import PointCloud, zero_mean
from .detect import DetectorConfig, SpatialIndex, detect_scene, score_at_point
from .errors import DataError, SchemaError, UsageError

log = logging.getLogger(__name__)

SALIENCY_SCHEMA = "affordkit-saliency"
SALIENCY_VERSION = 1


@dataclass
class SaliencyRecord:
    """Salient points of one scene, in its zero-meaned frame.

    status is "ok" for regular records; fallback extraction emits empty
    records with an explanatory status instead of failing.
    """

    scene_id: str
    affordance_ids: list[int]
    points: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m,) non-negative
    status: str = "ok"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if len(self.points) != len(self.weights):
            raise SchemaError(
                f"record {self.scene_id!r}: {len(self.points)} points vs {len(self.weights)} weights"
            )
        if len(self.weights) and (self.weights < 0).any():
            raise SchemaError(f"record {self.scene_id!r}: negative activation weight")
        if self.status == "ok" and not self.affordance_ids:
            raise SchemaError(f"record {self.scene_id!r}: affordance_ids must be non-empty")


def load_saliency(path, directory: dict[int, str] | None = None) -> list[SaliencyRecord]:
    """Read and validate an interchange file.

    File shape:
        {"schema": "affordkit-saliency", "version": 1,
         "records": [{"scene_id": str, "affordance_ids": [int, ...],
                      "points": [[x, y, z], ...], "weights": [w, ...]}]}

    With a descriptor directory given, records naming an unknown
    affordance id are rejected with a warning while the rest load.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read saliency file {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("schema") != SALIENCY_SCHEMA:
        raise SchemaError(f"not a saliency interchange file (schema {doc.get('schema')!r})")
    if doc.get("version") != SALIENCY_VERSION:
        raise SchemaError(
            f"saliency schema version {doc.get('version')!r} not supported "
            f"(this build reads {SALIENCY_VERSION})"
        )
    raw_records = doc.get("records")
    if not isinstance(raw_records, list):
        raise SchemaError("missing records list")

    records: list[SaliencyRecord] = []
    for i, raw in enumerate(raw_records):
        if not isinstance(raw, dict):
            raise SchemaError("record is not an object", record=i)
        try:
            scene_id = str(raw["scene_id"])
            affordance_ids = [int(k) for k in raw["affordance_ids"]]
            points = np.asarray(raw["points"], dtype=np.float64)
            weights = np.asarray(raw.get("weights", np.ones(len(points))), dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed record: {exc}", record=i) from exc
        if points.size and (points.ndim != 2 or points.shape[1] != 3):
            raise SchemaError(f"points must be (m, 3), got {points.shape}", record=i)
        if not affordance_ids:
            raise SchemaError("affordance_ids must be non-empty", record=i)
        if directory is not None:
            unknown = [k for k in affordance_ids if k not in directory]
            if unknown:
                log.warning(
                    "rejecting saliency record %d (%s): unknown affordance ids %s",
                    i, scene_id, unknown,
                )
                continue
        records.append(SaliencyRecord(
            scene_id=scene_id, affordance_ids=affordance_ids,
            points=points.reshape(-1, 3), weights=weights,
        ))
    return records


def save_saliency(records: list[SaliencyRecord], path) -> None:
    """Write records in the interchange shape read by load_saliency."""
    doc = {
        "schema": SALIENCY_SCHEMA,
        "version": SALIENCY_VERSION,
        "records": [
            {
                "scene_id": r.scene_id,
                "affordance_ids": [int(k) for k in r.affordance_ids],
                "points": [[float(v) for v in p] for p in r.points],
                "weights": [float(w) for w in r.weights],
            }
            for r in records
        ],
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1)


@dataclass
class ProjectionTally:
    """Projection counters per (cell index, affordance id).

    counts holds the received projections; missing counts projections
    whose affordance has no cells in the descriptor. Unweighted tallies
    count 1 per (salient point, affordance) pair, weighted tallies add
    the activation weight instead.
    """

    counts: dict = field(default_factory=dict)  # (cell, affordance) -> float
    missing: dict = field(default_factory=dict)  # affordance -> count
    weighted: bool = False

    def total(self) -> float:
        return sum(self.counts.values())

    def mass_for(self, affordance_id: int) -> float:
        return sum(v for (_, k), v in self.counts.items() if k == affordance_id)

    def cells_for(self, affordance_id: int) -> dict[int, float]:
        return {j: v for (j, k), v in self.counts.items() if k == affordance_id}

    def merge(self, other: "ProjectionTally") -> "ProjectionTally":
        if self.weighted != other.weighted:
            raise DataError("cannot merge weighted and unweighted tallies")
        out = ProjectionTally(weighted=self.weighted)
        for src in (self, other):
            for key, v in src.counts.items():
                out.counts[key] = out.counts.get(key, 0.0) + v
            for k, v in src.missing.items():
                out.missing[k] = out.missing.get(k, 0) + v
        return out


def _cells_by_affordance(descriptor: AgglomeratedDescriptor) -> dict[int, np.ndarray]:
    cells: dict[int, list[int]] = {}
    for j, cell in enumerate(descriptor.cells):
        for e in cell.entries:
            cells.setdefault(e.affordance_id, [])
            if not cells[e.affordance_id] or cells[e.affordance_id][-1] != j:
                cells[e.affordance_id].append(j)
    return {k: np.asarray(v, dtype=np.intp) for k, v in cells.items()}


def backproject(records: list[SaliencyRecord], descriptor: AgglomeratedDescriptor,
                weighted: bool = False) -> ProjectionTally:
    """Project every salient point into the nearest cell of each listed affordance.

    Additive over records and independent of record order; affordances
    with no cells in the descriptor are counted under missing.
    """
    tally = ProjectionTally(weighted=weighted)
    by_aff = _cells_by_affordance(descriptor)
    centroids = descriptor.centroids
    trees: dict[int, cKDTree] = {}
    for record in records:
        if not len(record.points):
            continue
        for k in record.affordance_ids:
            cell_ids = by_aff.get(k)
            if cell_ids is None or not len(cell_ids):
                tally.missing[k] = tally.missing.get(k, 0) + len(record.points)
                continue
            if k not in trees:
                trees[k] = cKDTree(centroids[cell_ids])
            _, li = trees[k].query(record.points)
            hits = cell_ids[li]
            adds = record.weights if weighted else np.ones(len(record.points))
            for j, a in zip(hits, adds):
                key = (int(j), int(k))
                tally.counts[key] = tally.counts.get(key, 0.0) + float(a)
    if tally.missing:
        log.warning("backprojection had no cells for affordances %s", sorted(tally.missing))
    return tally


def _keep_cells(tally: ProjectionTally, descriptor: AgglomeratedDescriptor,
                affordance_id: int, keep) -> set[int]:
    """Cells of one affordance that survive, ranked by tally then index."""
    candidate_cells = sorted({
        j for j, cell in enumerate(descriptor.cells)
        for e in cell.entries if e.affordance_id == affordance_id
    })
    counts = tally.cells_for(affordance_id)
    ranked = sorted(candidate_cells, key=lambda j: (-counts.get(j, 0.0), j))
    if isinstance(keep, (int, np.integer)):
        return set(ranked[:keep])
    mass = sum(counts.values())
    if mass <= 0.0:
        return set()
    target = keep * mass
    kept: set[int] = set()
    acc = 0.0
    for j in ranked:
        if acc >= target and kept:
            break
        kept.add(j)
        acc += counts.get(j, 0.0)
    return kept


def optimize_descriptor(descriptor: AgglomeratedDescriptor, tally: ProjectionTally,
                        keep: int | float = 0.9) -> AgglomeratedDescriptor:
    """Prune each affordance down to its most-projected cells.

    keep as an int is a per-affordance cell budget; as a float in
    (0, 1] it keeps the smallest top set covering that fraction of the
    affordance's projection mass. Ties rank by lowest cell index. An
    affordance with zero projection mass keeps nothing under the
    fraction rule and is reported.
    """
    if isinstance(keep, (int, np.integer)):
        if keep <= 0:
            raise UsageError("keep budget must be positive")
    elif isinstance(keep, float):
        if not 0.0 < keep <= 1.0:
            raise UsageError("keep fraction must be in (0, 1]")
    else:
        raise UsageError(f"keep must be an int budget or float fraction, got {type(keep)}")

    kept_by_aff = {
        k: _keep_cells(tally, descriptor, k, keep) for k in descriptor.directory
    }
    dropped = sorted(k for k, cells in kept_by_aff.items() if not cells)
    if dropped:
        log.warning("optimization dropped affordances with no projection mass: %s", dropped)

    new_cells: list[Cell] = []
    for j, cell in enumerate(descriptor.cells):
        entries = [e for e in cell.entries if j in kept_by_aff.get(e.affordance_id, ())]
        if entries:
            new_cells.append(Cell(centroid=cell.centroid, entries=entries))

    surviving = sorted({e.affordance_id for c in new_cells for e in c.entries})
    build_info = dict(descriptor.build_info)
    build_info.update({
        "optimized": True,
        "keep": keep,
        "tally_weighted": tally.weighted,
        "tally_total": tally.total(),
        "dropped_affordances": dropped,
    })
    return AgglomeratedDescriptor(
        cell_size=descriptor.cell_size,
        mode=descriptor.mode,
        cells=new_cells,
        directory={k: descriptor.directory[k] for k in surviving},
        centroid_offsets={k: descriptor.centroid_offsets[k] for k in surviving},
        build_info=build_info,
        config=dict(descriptor.config),
    )


def fallback_saliency(
    scene: PointCloud,
    descriptor: AgglomeratedDescriptor,
    top_fraction: float = 0.2,
    config: DetectorConfig | None = None,
    scene_id: str = "scene",
) -> SaliencyRecord:
    """Detection-driven salient points, no trained network required.

    Runs detection on the zero-meaned scene and counts how often each
    scene point is selected as a 1-NN target during above-threshold
    detections; the most-selected top_fraction of touched points become
    the salient set, with selection counts as weights.
    """
    if not 0.0 < top_fraction <= 1.0:
        raise UsageError("top_fraction must be in (0, 1]")
    config = config or DetectorConfig()
    if not len(scene):
        return SaliencyRecord(scene_id, [], np.zeros((0, 3)), np.zeros(0), status="empty-scene")
    centered, _ = zero_mean(scene)
    detections = detect_scene(centered, descriptor, config)
    if not detections:
        return SaliencyRecord(scene_id, [], np.zeros((0, 3)), np.zeros(0), status="no-detections")

    index = SpatialIndex(centered)
    counts: dict[int, int] = {}
    for det in detections:
        result = score_at_point(index, descriptor, det.test_point, config)
        for idx in result.nn_scene_indices:
            if idx >= 0:
                counts[int(idx)] = counts.get(int(idx), 0) + 1
    ranked = sorted(counts, key=lambda i: (-counts[i], i))
    top = max(1, math.ceil(top_fraction * len(ranked)))
    kept = ranked[:top]
    return SaliencyRecord(
        scene_id=scene_id,
        affordance_ids=sorted({d.affordance_id for d in detections}),
        points=centered.points[kept],
        weights=np.array([float(counts[i]) for i in kept]),
    )


def keypoint_set_from(descriptor: AgglomeratedDescriptor, affordance_id: int) -> KeypointSet:
    """Pull one affordance's kept keypoints back out of a descriptor."""
    pos, prov, w, orient = [], [], [], []
    for cell in descriptor.cells:
        for e in cell.entries:
            if e.affordance_id == affordance_id:
                pos.append(e.positions)
                prov.append(e.provenances)
                w.append(e.weights)
                orient.append(np.full(e.kept_count, e.orientation_id, dtype=np.int64))
    if not pos:
        raise DataError(f"descriptor holds no cells for affordance {affordance_id}")
    return KeypointSet(
        affordance_id=affordance_id,
        label=descriptor.directory.get(affordance_id, ""),
        positions=np.vstack(pos),
        provenances=np.vstack(prov),
        weights=np.concatenate(w),
        orientation_ids=np.concatenate(orient),
        centroid_offset=descriptor.centroid_offsets[affordance_id],
        aligned_frame=True,
    )


def optimize_single(
    descriptors,
    records: list[SaliencyRecord],
    cell_size: float,
    keep: int | float = 0.9,
    weighted: bool = False,
) -> AgglomeratedDescriptor:
    """Per-affordance saliency pruning followed by joint re-agglomeration.

    Each single descriptor is agglomerated alone, back-projected
    against only the records listing its affordance, pruned, and the
    surviving keypoints of all affordances are agglomerated together.
    """
    pruned_sets = []
    for d in descriptors:
        solo = agglomerate([d], cell_size)
        relevant = [
            SaliencyRecord(r.scene_id, [d.affordance_id], r.points, r.weights)
            for r in records if d.affordance_id in r.affordance_ids
        ]
        tally = backproject(relevant, solo, weighted=weighted)
        pruned = optimize_descriptor(solo, tally, keep)
        if len(pruned.cells):
            pruned_sets.append(keypoint_set_from(pruned, d.affordance_id))
        else:
            log.warning("single-variant pruning removed affordance %d entirely", d.affordance_id)
    if not pruned_sets:
        raise DataError("single-variant pruning removed every affordance")
    out = agglomerate(pruned_sets, cell_size)
    out.build_info["variant"] = "single"
    out.build_info["keep"] = keep
    return out
