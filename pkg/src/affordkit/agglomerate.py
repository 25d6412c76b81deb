"""Merge single-affordance descriptors into one multi-affordance grid.

A uniform cell grid is fitted over the joint keypoint set; every
keypoint joins its nearest cell centroid; empty cells are dropped; each
cell then keeps, per (affordance, orientation), only the keypoint
closest to the cell centroid (or all of them in "all" mode), and the
centroid moves to the mean of the kept set. The pass runs exactly once.

Determinism: a keypoint equidistant to two seed centroids joins the
lower cell in lexicographic (ix, iy, iz) order; two keypoints
equidistant to a centroid keep the lower global keypoint index.
"""

from __future__ import annotations

import itertools
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DescriptorFormatError, UsageError, VersionError
from .tensor import (
    MAGIC,
    CONTAINER_VERSION,
    ORIENTATION_BINS,
    _HEADER,
    _pack_blob,
    _read_blob,
    _read_exact,
)

MODES = ("closest", "all")
_MODE_ALIASES = {"closest-per-affordance": "closest", "it-all": "all"}

_ZERO_MEAN_TOL = 1e-5


@dataclass
class KeypointSet:
    """Bare keypoint bundle, the minimal agglomeration input.

    aligned_frame marks sets already expressed in the shared zero-mean
    frame (e.g. keypoints pulled back out of a pruned descriptor),
    which are exempt from the zero-mean precondition check.
    """

    affordance_id: int
    label: str
    positions: np.ndarray
    provenances: np.ndarray
    weights: np.ndarray
    orientation_ids: np.ndarray
    centroid_offset: np.ndarray
    aligned_frame: bool = False


@dataclass
class CellEntry:
    """Kept keypoints of one (affordance, orientation) inside one cell."""

    affordance_id: int
    orientation_id: int
    positions: np.ndarray  # (m, 3)
    provenances: np.ndarray  # (m, 3)
    weights: np.ndarray  # (m,)
    member_count: int

    @property
    def kept_count(self) -> int:
        return len(self.positions)


@dataclass
class Cell:
    centroid: np.ndarray
    entries: list[CellEntry]


@dataclass
class AgglomeratedDescriptor:
    """Multi-affordance representation: grid cell centroids plus entries."""

    cell_size: float
    mode: str
    cells: list[Cell]
    directory: dict[int, str]
    centroid_offsets: dict[int, np.ndarray]
    build_info: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    _flat: dict | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def centroids(self) -> np.ndarray:
        if not self.cells:
            return np.zeros((0, 3))
        return np.array([c.centroid for c in self.cells])

    def kept_keypoint_count(self) -> int:
        return sum(e.kept_count for c in self.cells for e in c.entries)

    def member_count(self) -> int:
        return sum(e.member_count for c in self.cells for e in c.entries)

    def affordance_ids(self) -> list[int]:
        return sorted(self.directory)

    def bounding_box_diagonal(self) -> float:
        cents = self.centroids
        if not len(cents):
            return 0.0
        return float(np.linalg.norm(cents.max(axis=0) - cents.min(axis=0)))

    def flattened(self) -> dict:
        """Arrays over all kept keypoints, cached for the scoring hot path.

        Keys: centroids (C,3); cell (M,), aff (M,), orient (M,),
        pos (M,3), prov (M,3), w (M,); group_totals maps
        (affordance, orientation) -> entry count.
        """
        if self._flat is None:
            cell_idx, aff, orient, pos, prov, w = [], [], [], [], [], []
            for j, cell in enumerate(self.cells):
                for e in cell.entries:
                    m = e.kept_count
                    cell_idx.extend([j] * m)
                    aff.extend([e.affordance_id] * m)
                    orient.extend([e.orientation_id] * m)
                    pos.append(e.positions)
                    prov.append(e.provenances)
                    w.append(e.weights)
            flat = {
                "centroids": self.centroids,
                "cell": np.asarray(cell_idx, dtype=np.intp),
                "aff": np.asarray(aff, dtype=np.int64),
                "orient": np.asarray(orient, dtype=np.int64),
                "pos": np.vstack(pos) if pos else np.zeros((0, 3)),
                "prov": np.vstack(prov) if prov else np.zeros((0, 3)),
                "w": np.concatenate(w) if w else np.zeros(0),
            }
            flat["pnorm"] = np.linalg.norm(flat["prov"], axis=1)
            keys = flat["aff"] * ORIENTATION_BINS + flat["orient"]
            uniq, inv = np.unique(keys, return_inverse=True)
            flat["group_index"] = inv
            flat["group_aff"] = uniq // ORIENTATION_BINS
            flat["group_orient"] = uniq % ORIENTATION_BINS
            flat["group_sizes"] = np.bincount(inv, minlength=len(uniq))
            self._flat = flat
        return self._flat

    def equals(self, other: "AgglomeratedDescriptor") -> bool:
        if (self.cell_size != other.cell_size or self.mode != other.mode
                or len(self.cells) != len(other.cells)
                or self.directory != other.directory):
            return False
        for k in self.centroid_offsets:
            if k not in other.centroid_offsets:
                return False
            if not np.array_equal(self.centroid_offsets[k], other.centroid_offsets[k]):
                return False
        for a, b in zip(self.cells, other.cells):
            if not np.array_equal(a.centroid, b.centroid) or len(a.entries) != len(b.entries):
                return False
            for ea, eb in zip(a.entries, b.entries):
                if (ea.affordance_id != eb.affordance_id
                        or ea.orientation_id != eb.orientation_id
                        or ea.member_count != eb.member_count
                        or not np.array_equal(ea.positions, eb.positions)
                        or not np.array_equal(ea.provenances, eb.provenances)
                        or not np.array_equal(ea.weights, eb.weights)):
                    return False
        return self.build_info == other.build_info and self.config == other.config


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise UsageError(f"unknown agglomeration mode {mode!r}; expected one of {MODES}")
    return mode


def grid_geometry(points: np.ndarray, cell_size: float):
    """Grid covering the keypoint bounding box: (origin, dims per axis)."""
    origin = points.min(axis=0)
    span = points.max(axis=0) - origin
    dims = np.maximum(np.ceil(span / cell_size).astype(np.int64), 1)
    return origin, dims


def assign_to_grid(points: np.ndarray, origin: np.ndarray, dims: np.ndarray,
                   cell_size: float) -> np.ndarray:
    """Flat index of the nearest grid-cell centroid for every point.

    The containing cell wins except on exact boundary ties, which go to
    the lexicographically lowest neighbor; only the 3x3x3 neighborhood
    around the containing cell can hold the nearest centroid.
    """
    base = np.clip(np.floor((points - origin) / cell_size).astype(np.int64), 0, dims - 1)
    best_d2 = np.full(len(points), np.inf)
    best_flat = np.zeros(len(points), dtype=np.int64)
    for off in itertools.product((-1, 0, 1), repeat=3):
        idx = np.clip(base + np.asarray(off, dtype=np.int64), 0, dims - 1)
        flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
        centers = origin + (idx + 0.5) * cell_size
        diff = points - centers
        d2 = (diff * diff).sum(axis=1)
        better = (d2 < best_d2) | ((d2 == best_d2) & (flat < best_flat))
        best_d2 = np.where(better, d2, best_d2)
        best_flat = np.where(better, flat, best_flat)
    return best_flat


def _gather_inputs(descriptors):
    pos, prov, w, orient, aff = [], [], [], [], []
    directory: dict[int, str] = {}
    offsets: dict[int, np.ndarray] = {}
    for d in descriptors:
        aligned = getattr(d, "aligned_frame", False)
        if len(d.positions) and not aligned:
            mean = np.abs(d.positions.mean(axis=0)).max()
            if mean > _ZERO_MEAN_TOL:
                raise DataError(
                    f"descriptor for affordance {d.affordance_id} is not zero-meaned "
                    f"(|mean| = {mean:.2e}); agglomeration requires a shared origin"
                )
        if d.affordance_id in directory and directory[d.affordance_id] != d.label:
            raise DataError(f"affordance id {d.affordance_id} appears with two labels")
        directory[d.affordance_id] = d.label
        offsets[d.affordance_id] = np.asarray(d.centroid_offset, dtype=np.float64)
        pos.append(d.positions)
        prov.append(d.provenances)
        w.append(d.weights)
        orient.append(np.asarray(d.orientation_ids, dtype=np.int64))
        aff.append(np.full(len(d.positions), d.affordance_id, dtype=np.int64))
    return (np.vstack(pos), np.vstack(prov), np.concatenate(w),
            np.concatenate(orient), np.concatenate(aff), directory, offsets)


def agglomerate(descriptors, cell_size: float, mode: str = "closest",
                config: dict | None = None) -> AgglomeratedDescriptor:
    """Single-pass grid clustering of many descriptors into one."""
    if not descriptors:
        raise DataError("agglomerate needs at least one descriptor")
    if cell_size <= 0:
        raise UsageError(f"cell size must be positive, got {cell_size}")
    mode = normalize_mode(mode)

    pos, prov, w, orient, aff, directory, offsets = _gather_inputs(descriptors)
    if not len(pos):
        raise DataError("agglomerate received descriptors with no keypoints")

    origin, dims = grid_geometry(pos, cell_size)
    assigned = assign_to_grid(pos, origin, dims, cell_size)

    occupied = np.unique(assigned)  # ascending == lexicographic cell order
    cell_rank = np.searchsorted(occupied, assigned)
    iz = occupied % dims[2]
    iy = (occupied // dims[2]) % dims[1]
    ix = occupied // (dims[1] * dims[2])
    seeds = origin + (np.stack([ix, iy, iz], axis=1) + 0.5) * cell_size

    diff = pos - seeds[cell_rank]
    d2_seed = (diff * diff).sum(axis=1)
    kp_index = np.arange(len(pos))

    # Sort groups (cell, affordance, orientation), nearest-to-seed first.
    order = np.lexsort((kp_index, d2_seed, orient, aff, cell_rank))
    sc, sa, so = cell_rank[order], aff[order], orient[order]
    group_start = np.ones(len(order), dtype=bool)
    group_start[1:] = (np.diff(sc) != 0) | (np.diff(sa) != 0) | (np.diff(so) != 0)
    group_id = np.cumsum(group_start) - 1
    group_sizes = np.bincount(group_id)

    if mode == "closest":
        kept_sorted_rows = np.flatnonzero(group_start)
    else:
        kept_sorted_rows = np.arange(len(order))
    kept = order[kept_sorted_rows]
    kept_cells = cell_rank[kept]

    sums = np.zeros((len(occupied), 3))
    np.add.at(sums, kept_cells, pos[kept])
    counts = np.bincount(kept_cells, minlength=len(occupied))
    centroids = sums / counts[:, None]

    cells: list[Cell] = []
    firsts = np.flatnonzero(group_start)
    current_rank = -1
    for g, start in enumerate(firsts):
        size = int(group_sizes[g])
        rows = order[start:start + size] if mode == "all" else order[start:start + 1]
        j = int(sc[start])
        entry = CellEntry(
            affordance_id=int(sa[start]),
            orientation_id=int(so[start]),
            positions=pos[rows].copy(),
            provenances=prov[rows].copy(),
            weights=w[rows].copy(),
            member_count=size,
        )
        if j != current_rank:
            cells.append(Cell(centroid=centroids[j], entries=[]))
            current_rank = j
        cells[-1].entries.append(entry)

    build_info = {
        "cell_size": float(cell_size),
        "mode": mode,
        "descriptors": [
            {"affordance_id": int(k), "label": directory[k]} for k in sorted(directory)
        ],
        "input_keypoints": int(len(pos)),
    }
    return AgglomeratedDescriptor(
        cell_size=float(cell_size),
        mode=mode,
        cells=cells,
        directory=directory,
        centroid_offsets=offsets,
        build_info=build_info,
        config=dict(config or {}),
    )


# ------------------------------------------------------- container I/O

_TYPE_AGGLOMERATED = 2
_FIXED_AGG = struct.Struct("<dBxxxII")
_CELL_HEAD = struct.Struct("<3dI")
_ENTRY_HEAD = struct.Struct("<iIII")
_KEPT = struct.Struct("<3d3dd")


def save_agglomerated_descriptor(d: AgglomeratedDescriptor, path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, _TYPE_AGGLOMERATED, 0))
        f.write(_FIXED_AGG.pack(d.cell_size, MODES.index(d.mode), len(d.cells),
                                len(d.directory)))
        for k in sorted(d.directory):
            f.write(struct.pack("<i", k))
            f.write(_pack_blob(d.directory[k].encode("utf-8")))
            f.write(struct.pack("<3d", *d.centroid_offsets[k]))
        f.write(_pack_blob(json.dumps(d.build_info, sort_keys=True).encode("utf-8")))
        f.write(_pack_blob(json.dumps(d.config, sort_keys=True).encode("utf-8")))
        for cell in d.cells:
            f.write(_CELL_HEAD.pack(*cell.centroid, len(cell.entries)))
            for e in cell.entries:
                f.write(_ENTRY_HEAD.pack(e.affordance_id, e.orientation_id,
                                         e.member_count, e.kept_count))
                for i in range(e.kept_count):
                    f.write(_KEPT.pack(*e.positions[i], *e.provenances[i], e.weights[i]))


def load_agglomerated_descriptor(path) -> AgglomeratedDescriptor:
    from .tensor import _check_header

    with open(path, "rb") as f:
        _check_header(f, _TYPE_AGGLOMERATED, "an agglomerated descriptor")
        cell_size, mode_idx, n_cells, n_aff = _FIXED_AGG.unpack(
            _read_exact(f, _FIXED_AGG.size, "agglomeration header"))
        if mode_idx >= len(MODES):
            raise DescriptorFormatError(f"unknown mode tag {mode_idx}")
        directory: dict[int, str] = {}
        offsets: dict[int, np.ndarray] = {}
        for _ in range(n_aff):
            (k,) = struct.unpack("<i", _read_exact(f, 4, "directory id"))
            directory[k] = _read_blob(f, "directory label").decode("utf-8")
            offsets[k] = np.array(struct.unpack("<3d", _read_exact(f, 24, "centroid offset")))
        build_info = json.loads(_read_blob(f, "build info").decode("utf-8") or "{}")
        config = json.loads(_read_blob(f, "config").decode("utf-8") or "{}")
        cells: list[Cell] = []
        for _ in range(n_cells):
            *centroid, n_entries = _CELL_HEAD.unpack(
                _read_exact(f, _CELL_HEAD.size, "cell header"))
            entries = []
            for _ in range(n_entries):
                aff_id, orient, member_count, kept_count = _ENTRY_HEAD.unpack(
                    _read_exact(f, _ENTRY_HEAD.size, "entry header"))
                raw = _read_exact(f, _KEPT.size * kept_count, "kept keypoints")
                rows = np.array(list(struct.iter_unpack(_KEPT.format, raw)),
                                dtype=np.float64).reshape(kept_count, 7)
                entries.append(CellEntry(
                    affordance_id=aff_id, orientation_id=orient,
                    positions=rows[:, 0:3], provenances=rows[:, 3:6],
                    weights=rows[:, 6], member_count=member_count))
            cells.append(Cell(centroid=np.array(centroid), entries=entries))
        trailing = f.read(1)
    if trailing:
        raise DescriptorFormatError("corrupt container: trailing bytes after cells")
    return AgglomeratedDescriptor(
        cell_size=cell_size, mode=MODES[mode_idx], cells=cells,
        directory=directory, centroid_offsets=offsets,
        build_info=build_info, config=config)


def write_manifest(d: AgglomeratedDescriptor, path) -> None:
    """Human-readable manifest of the constituent affordances."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"cell_size_m {d.cell_size}\nmode {d.mode}\ncells {len(d.cells)}\n")
        f.write(f"kept_keypoints {d.kept_keypoint_count()}\n")
        f.write(f"input_keypoints {d.member_count()}\n")
        for k in sorted(d.directory):
            f.write(f"affordance {k} {d.directory[k]}\n")
