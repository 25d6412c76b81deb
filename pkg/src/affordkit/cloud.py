"""Pointcloud data model, voxel downsampling and spatial queries.

All coordinates are metric (meters, world frame, +z up). Clouds are
never normalized to a unit sphere or box; every stage of the pipeline
works at real-world scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, UsageError

_NORMAL_TOL = 1e-6


@dataclass
class PointCloud:
    """Ordered set of 3D points with optional unit normals.

    points: (n, 3) float64 array in meters.
    normals: (n, 3) float64 array of unit vectors, or None.
    frame_id: free-text label of the coordinate frame.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    frame_id: str = "world"

    def __post_init__(self):
        self.points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if self.points.size == 0:
            self.points = self.points.reshape(0, 3)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"points must be (n, 3), got {self.points.shape}")
        if not np.isfinite(self.points).all():
            raise DataError("points contain non-finite coordinates")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(np.asarray(self.normals, dtype=np.float64))
            if self.normals.shape != self.points.shape:
                raise DataError(
                    f"normals shape {self.normals.shape} does not match points {self.points.shape}"
                )
            if len(self.normals):
                lengths = np.linalg.norm(self.normals, axis=1)
                if not np.allclose(lengths, 1.0, atol=_NORMAL_TOL):
                    raise DataError("normals must be unit length within 1e-6")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def has_normals(self) -> bool:
        return self.normals is not None

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box as (min_corner, max_corner)."""
        if not len(self):
            raise DataError("empty cloud has no bounds")
        return self.points.min(axis=0), self.points.max(axis=0)

    def translated(self, offset) -> "PointCloud":
        offset = np.asarray(offset, dtype=np.float64)
        return PointCloud(self.points + offset, self.normals, self.frame_id)

    def transformed(self, rotation, translation) -> "PointCloud":
        """Apply p -> R p + t to points (and R to normals)."""
        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64)
        pts = self.points @ rotation.T + translation
        normals = self.normals @ rotation.T if self.normals is not None else None
        return PointCloud(pts, normals, self.frame_id)


class SpatialIndex:
    """Immutable k-NN / radius index over one cloud.

    Queries through `nearest` and `radius` reproduce a brute-force
    linear scan exactly, including tie-breaking by lowest point index:
    the kd-tree proposes a candidate neighborhood, then distances are
    re-evaluated with plain numpy arithmetic so the winner is decided
    by the same float operations a scan would use.

    Safe for concurrent read-only use once built.
    """

    def __init__(self, cloud: PointCloud):
        if not len(cloud):
            raise DataError("cannot index an empty cloud")
        self.cloud = cloud
        self._tree = cKDTree(cloud.points)

    def __len__(self) -> int:
        return len(self.cloud)

    def nearest(self, q) -> tuple[int, float]:
        """Exact 1-NN of query point q; ties go to the lowest index."""
        q = np.asarray(q, dtype=np.float64)
        d0, _ = self._tree.query(q)
        pad = d0 * (1.0 + 1e-9) + 1e-300
        candidates = self._tree.query_ball_point(q, pad)
        pts = self.cloud.points[candidates]
        dists = np.linalg.norm(pts - q, axis=1)
        order = np.lexsort((candidates, dists))
        best = order[0]
        return int(candidates[best]), float(dists[best])

    def radius(self, q, r: float) -> list[int]:
        """Indices of all points with distance <= r, ascending."""
        if r < 0:
            raise UsageError("radius must be non-negative")
        q = np.asarray(q, dtype=np.float64)
        candidates = self._tree.query_ball_point(q, r * (1.0 + 1e-9) + 1e-300)
        if not candidates:
            return []
        candidates = np.asarray(sorted(candidates))
        dists = np.linalg.norm(self.cloud.points[candidates] - q, axis=1)
        return [int(i) for i in candidates[dists <= r]]

    def query_batch(self, queries) -> tuple[np.ndarray, np.ndarray]:
        """Fast batched 1-NN: (distances, indices).

        Deterministic, but tie-breaking follows the underlying tree
        rather than the lowest-index rule; use `nearest` where the
        scan-equivalence contract matters.
        """
        queries = np.asarray(queries, dtype=np.float64)
        d, i = self._tree.query(queries)
        return d, i

    def points_within(self, q, r: float) -> np.ndarray:
        """Indices within radius r, unordered fast path."""
        return np.asarray(self._tree.query_ball_point(np.asarray(q, dtype=np.float64), r), dtype=np.intp)


@dataclass
class VoxelGrid:
    """Uniform cell partition of a cloud.

    Every point maps to cell floor((p - origin) / cell_size), computed
    componentwise; only occupied cells are stored.
    """

    cell_size: float
    origin: np.ndarray
    cells: dict = field(default_factory=dict)

    @classmethod
    def from_cloud(cls, cloud: PointCloud, cell_size: float, origin=None) -> "VoxelGrid":
        if cell_size <= 0:
            raise UsageError(f"cell size must be positive, got {cell_size}")
        if origin is None:
            origin = cloud.bounds()[0] if len(cloud) else np.zeros(3)
        origin = np.asarray(origin, dtype=np.float64)
        grid = cls(cell_size=float(cell_size), origin=origin)
        if len(cloud):
            idx = np.floor((cloud.points - origin) / cell_size).astype(np.int64)
            for i, key in enumerate(map(tuple, idx)):
                grid.cells.setdefault(key, []).append(i)
        return grid

    def cell_of(self, p) -> tuple[int, int, int]:
        p = np.asarray(p, dtype=np.float64)
        return tuple(np.floor((p - self.origin) / self.cell_size).astype(np.int64))

    def __len__(self) -> int:
        return len(self.cells)


def voxel_downsample(cloud: PointCloud, cell_size: float) -> PointCloud:
    """One output point per occupied cell, at the centroid of its members.

    Output cells are ordered by first appearance in the input; normals
    are dropped (a centroid has no well-defined normal).
    """
    if cell_size <= 0:
        raise UsageError(f"cell size must be positive, got {cell_size}")
    if not len(cloud):
        return PointCloud(np.zeros((0, 3)), frame_id=cloud.frame_id)
    grid = VoxelGrid.from_cloud(cloud, cell_size)
    order = sorted(grid.cells.items(), key=lambda kv: kv[1][0])
    centroids = np.array([cloud.points[members].mean(axis=0) for _, members in order])
    return PointCloud(centroids, frame_id=cloud.frame_id)


def zero_mean(cloud: PointCloud) -> tuple[PointCloud, np.ndarray]:
    """Translate the cloud so its centroid is the origin.

    Returns the centered cloud and the removed centroid, which callers
    keep around to recover poses later.
    """
    if not len(cloud):
        raise DataError("cannot zero-mean an empty cloud")
    centroid = cloud.points.mean(axis=0)
    return PointCloud(cloud.points - centroid, cloud.normals, cloud.frame_id), centroid
