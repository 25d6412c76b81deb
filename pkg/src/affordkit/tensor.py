"""Single-affordance interaction descriptors.

An interaction example (query object posed against a scene patch) is
turned into a descriptor in four steps: approximate the bisector
surface between the two clouds, attach a provenance vector to every
bisector sample, draw a fixed number of affordance keypoints, and spin
the keypoints into ORIENTATION_BINS copies about +z before zero-meaning
the whole set.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import DataError, DescriptorFormatError, UsageError, VersionError

log = logging.getLogger(__name__)

ORIENTATION_BINS = 8
DEFAULT_KEYPOINTS = 512
DEFAULT_BISECTOR_TOL = 0.002  # meters
DEFAULT_TENSOR_SAMPLES = 4096
SAMPLING_SCHEMES = ("uniform", "proximity")


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def orientation_rotation(orientation_id: int) -> np.ndarray:
    """Rotation matrix of orientation bin m: 2*pi*m / ORIENTATION_BINS about +z."""
    return rotation_about_z(2.0 * np.pi * orientation_id / ORIENTATION_BINS)


@dataclass
class InteractionExample:
    """One demonstrated interaction: a query object posed in a scene patch."""

    affordance_id: int
    label: str  # verb-object pair, e.g. "Place-book"
    query_object: PointCloud
    scene_patch: PointCloud
    object_pose: np.ndarray | None = None  # 4x4, object frame -> scene frame
    contact_bound: float = 2.0  # meters

    def __post_init__(self):
        if self.object_pose is None:
            self.object_pose = np.eye(4)
        self.object_pose = np.asarray(self.object_pose, dtype=np.float64)
        if self.object_pose.shape != (4, 4):
            raise DataError(f"object_pose must be 4x4, got {self.object_pose.shape}")

    def posed_object(self) -> PointCloud:
        """Query object expressed in the scene frame."""
        return self.query_object.transformed(self.object_pose[:3, :3], self.object_pose[:3, 3])

    def validate(self) -> None:
        if not len(self.query_object) or not len(self.scene_patch):
            raise DataError("interaction example needs non-empty object and scene clouds")
        obj = self.posed_object()
        tree = cKDTree(self.scene_patch.points)
        d, _ = tree.query(obj.points)
        dmin = float(d.min())
        if dmin == 0.0:
            raise DataError("object and scene share coordinates; bisector is ambiguous")
        if dmin >= self.contact_bound:
            raise DataError(
                f"object is {dmin:.3f} m from the scene, beyond the contact bound "
                f"{self.contact_bound:.3f} m"
            )


@dataclass
class BisectorSample:
    """Point equidistant from the scene and the object clouds."""

    position: np.ndarray
    generating_scene_point: np.ndarray
    generating_object_point: np.ndarray


@dataclass
class AffordanceKeypoint:
    """Sampled bisector point with its provenance vector and weight.

    position: location in the descriptor frame.
    provenance: vector from the keypoint toward its generating scene point.
    weight: provenance magnitude; used as the score kernel's sigma.
    """

    position: np.ndarray
    provenance: np.ndarray
    weight: float
    affordance_id: int
    orientation_id: int = 0


@dataclass
class AffordanceDescriptor:
    """Zero-meaned keypoint set covering all orientation bins of one affordance."""

    affordance_id: int
    label: str
    keypoints_per_orientation: int
    centroid_offset: np.ndarray
    positions: np.ndarray  # (8N, 3)
    provenances: np.ndarray  # (8N, 3)
    weights: np.ndarray  # (8N,)
    orientation_ids: np.ndarray  # (8N,) ints in [0, ORIENTATION_BINS)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.positions)
        if n != ORIENTATION_BINS * self.keypoints_per_orientation:
            raise DataError(
                f"descriptor must hold {ORIENTATION_BINS}*N keypoints, "
                f"got {n} for N={self.keypoints_per_orientation}"
            )
        mean = np.abs(self.positions.mean(axis=0)).max() if n else 0.0
        if mean > 1e-6:
            raise DataError(f"descriptor keypoints are not zero-meaned (|mean| = {mean:.2e})")

    def __len__(self) -> int:
        return len(self.positions)

    def bounding_box_diagonal(self) -> float:
        span = self.positions.max(axis=0) - self.positions.min(axis=0)
        return float(np.linalg.norm(span))


def compute_bisector(
    example: InteractionExample,
    samples: int,
    tolerance: float = DEFAULT_BISECTOR_TOL,
    seed: int = 0,
    max_rounds: int = 8,
) -> list[BisectorSample]:
    """Sample the equidistance surface between scene and posed object.

    Candidates are seeded from cross nearest-neighbor pairs and from
    random scene/object point pairs; each candidate segment is bisected
    on f(x) = d(x, scene) - d(x, object), which changes sign between
    its endpoints, until |f| falls below tolerance/4. Accepted samples
    are deduplicated and clipped to the joint bounding box expanded by
    one object diameter. Returns fewer than `samples` (with a warning)
    only when the candidate budget is exhausted.
    """
    if samples < 1:
        raise UsageError("samples must be >= 1")
    example.validate()
    scene = example.scene_patch.points
    obj = example.posed_object().points
    scene_tree = cKDTree(scene)
    obj_tree = cKDTree(obj)
    rng = np.random.default_rng(seed)

    lo = np.minimum(scene.min(axis=0), obj.min(axis=0))
    hi = np.maximum(scene.max(axis=0), obj.max(axis=0))
    obj_diam = float(np.linalg.norm(obj.max(axis=0) - obj.min(axis=0)))
    box_lo, box_hi = lo - obj_diam, hi + obj_diam

    def refine(starts_obj: np.ndarray, starts_scene: np.ndarray) -> np.ndarray:
        """Vectorized bisection along segments object-point -> scene-point."""
        t_lo = np.zeros(len(starts_obj))
        t_hi = np.ones(len(starts_obj))
        seg = starts_scene - starts_obj
        target = tolerance / 4.0
        for _ in range(60):
            t_mid = 0.5 * (t_lo + t_hi)
            x = starts_obj + t_mid[:, None] * seg
            ds, _ = scene_tree.query(x)
            do, _ = obj_tree.query(x)
            f = ds - do
            done = np.abs(f) <= target
            if done.all():
                break
            pos = f > 0
            t_lo = np.where(pos & ~done, t_mid, t_lo)
            t_hi = np.where(~pos & ~done, t_mid, t_hi)
        return starts_obj + (0.5 * (t_lo + t_hi))[:, None] * seg

    accepted_pos: list[np.ndarray] = []
    seen: set[tuple] = set()

    def harvest(candidates: np.ndarray) -> None:
        if not len(candidates):
            return
        ds, _ = scene_tree.query(candidates)
        do, _ = obj_tree.query(candidates)
        ok = np.abs(ds - do) <= tolerance
        ok &= np.all(candidates >= box_lo, axis=1) & np.all(candidates <= box_hi, axis=1)
        for x in candidates[ok]:
            key = tuple(np.round(x, 9))
            if key not in seen:
                seen.add(key)
                accepted_pos.append(x)

    # Seed rounds: cross nearest-neighbor pairs stay true to the gap geometry.
    _, nn_s = scene_tree.query(obj)
    harvest(refine(obj, scene[nn_s]))
    if len(accepted_pos) < samples:
        _, nn_o = obj_tree.query(scene)
        harvest(refine(obj[nn_o], scene))

    rounds = 0
    while len(accepted_pos) < samples and rounds < max_rounds:
        rounds += 1
        batch = max(samples - len(accepted_pos), 256)
        oi = rng.integers(0, len(obj), size=batch)
        si = rng.integers(0, len(scene), size=batch)
        harvest(refine(obj[oi], scene[si]))

    if len(accepted_pos) < samples:
        log.warning(
            "bisector sampling found %d of %d requested points", len(accepted_pos), samples
        )
    if len(accepted_pos) > samples:
        # Uniform cut avoids biasing the tensor toward early candidates.
        keep = rng.choice(len(accepted_pos), size=samples, replace=False)
        keep.sort()
        accepted_pos = [accepted_pos[i] for i in keep]
    positions = np.array(accepted_pos)
    _, gen_s = scene_tree.query(positions)
    _, gen_o = obj_tree.query(positions)
    return [
        BisectorSample(position=positions[i], generating_scene_point=scene[gen_s[i]],
                       generating_object_point=obj[gen_o[i]])
        for i in range(len(positions))
    ]


def compute_provenance(samples: list[BisectorSample]) -> list[tuple[np.ndarray, np.ndarray]]:
    """Provenance vector of each sample: from the sample to its scene point.

    Samples whose position coincides with the generating scene point
    carry no direction and are dropped with a warning.
    """
    out = []
    dropped = 0
    for s in samples:
        p = s.generating_scene_point - s.position
        if np.linalg.norm(p) == 0.0:
            dropped += 1
            continue
        out.append((s.position, p))
    if dropped:
        log.warning("dropped %d bisector samples with zero-length provenance", dropped)
    return out


def sample_keypoints(
    tensor: list[tuple[np.ndarray, np.ndarray]],
    n: int,
    scheme: str = "proximity",
    seed: int = 0,
    affordance_id: int = 0,
) -> list[AffordanceKeypoint]:
    """Draw n keypoints from the tensor samples.

    uniform: equal probability. proximity: probability proportional to
    1/|provenance|, favoring near-contact samples. Drawn without
    replacement when the tensor is large enough, with replacement (and
    a warning) otherwise. Weight = |provenance|.
    """
    if not tensor:
        raise DataError("cannot sample keypoints from an empty tensor")
    if n < 1:
        raise UsageError("keypoint count must be >= 1")
    if scheme not in SAMPLING_SCHEMES:
        raise UsageError(f"unknown sampling scheme {scheme!r}; expected one of {SAMPLING_SCHEMES}")

    magnitudes = np.array([np.linalg.norm(p) for _, p in tensor])
    if scheme == "proximity":
        probs = 1.0 / magnitudes
        probs /= probs.sum()
    else:
        probs = np.full(len(tensor), 1.0 / len(tensor))

    rng = np.random.default_rng(seed)
    replace = n > len(tensor)
    if replace:
        log.warning(
            "requested %d keypoints from a %d-sample tensor; sampling with replacement",
            n, len(tensor),
        )
    chosen = rng.choice(len(tensor), size=n, replace=replace, p=probs)
    return [
        AffordanceKeypoint(
            position=np.asarray(tensor[i][0], dtype=np.float64),
            provenance=np.asarray(tensor[i][1], dtype=np.float64),
            weight=float(magnitudes[i]),
            affordance_id=affordance_id,
            orientation_id=0,
        )
        for i in chosen
    ]


def augment_descriptor(
    keypoints: list[AffordanceKeypoint],
    label: str = "",
    config: dict | None = None,
) -> AffordanceDescriptor:
    """Spin keypoints into ORIENTATION_BINS copies about +z and zero-mean.

    Positions and provenance vectors are both rotated; the removed
    centroid is recorded so object poses can be recovered at detection
    time.
    """
    if not keypoints:
        raise DataError("cannot augment an empty keypoint list")
    if any(k.orientation_id != 0 for k in keypoints):
        raise DataError("augmentation input must all be orientation 0")
    affordance_ids = {k.affordance_id for k in keypoints}
    if len(affordance_ids) != 1:
        raise DataError("augmentation input must belong to a single affordance")
    affordance_id = affordance_ids.pop()

    base_pos = np.array([k.position for k in keypoints])
    base_prov = np.array([k.provenance for k in keypoints])
    weights = np.array([k.weight for k in keypoints])

    n = len(keypoints)
    positions = np.empty((ORIENTATION_BINS * n, 3))
    provenances = np.empty_like(positions)
    orientation_ids = np.empty(ORIENTATION_BINS * n, dtype=np.int64)
    for m in range(ORIENTATION_BINS):
        rot = orientation_rotation(m)
        positions[m * n:(m + 1) * n] = base_pos @ rot.T
        provenances[m * n:(m + 1) * n] = base_prov @ rot.T
        orientation_ids[m * n:(m + 1) * n] = m

    centroid = positions.mean(axis=0)
    positions -= centroid
    return AffordanceDescriptor(
        affordance_id=affordance_id,
        label=label,
        keypoints_per_orientation=n,
        centroid_offset=centroid,
        positions=positions,
        provenances=provenances,
        weights=np.tile(weights, ORIENTATION_BINS),
        orientation_ids=orientation_ids,
        config=dict(config or {}),
    )


def build_descriptor(
    example: InteractionExample,
    n_keypoints: int = DEFAULT_KEYPOINTS,
    scheme: str = "proximity",
    seed: int = 0,
    tensor_samples: int = DEFAULT_TENSOR_SAMPLES,
    tolerance: float = DEFAULT_BISECTOR_TOL,
    config: dict | None = None,
) -> AffordanceDescriptor:
    """Full single-affordance pipeline: bisector -> provenance -> sample -> spin."""
    samples = compute_bisector(example, tensor_samples, tolerance=tolerance, seed=seed)
    tensor = compute_provenance(samples)
    keypoints = sample_keypoints(tensor, n_keypoints, scheme=scheme, seed=seed,
                                 affordance_id=example.affordance_id)
    return augment_descriptor(keypoints, label=example.label, config=config)


# ------------------------------------------------------- container I/O

MAGIC = b"AFKD"
CONTAINER_VERSION = 1
_TYPE_SINGLE = 1
_HEADER = struct.Struct("<4sHBB")
_FIXED = struct.Struct("<iIII3d")
_RECORD = struct.Struct("<3d3ddI")


def _pack_blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def _read_exact(f, n: int, what: str):
    data = f.read(n)
    if len(data) != n:
        raise DescriptorFormatError(f"corrupt container: truncated while reading {what}")
    return data


def _read_blob(f, what: str) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(f, 4, what + " length"))
    return _read_exact(f, n, what)


def save_affordance_descriptor(d: AffordanceDescriptor, path) -> None:
    import json

    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, CONTAINER_VERSION, _TYPE_SINGLE, 0))
        f.write(_FIXED.pack(d.affordance_id, d.keypoints_per_orientation,
                            ORIENTATION_BINS, len(d), *d.centroid_offset))
        f.write(_pack_blob(d.label.encode("utf-8")))
        f.write(_pack_blob(json.dumps(d.config, sort_keys=True).encode("utf-8")))
        for i in range(len(d)):
            f.write(_RECORD.pack(*d.positions[i], *d.provenances[i],
                                 d.weights[i], int(d.orientation_ids[i])))


def _check_header(f, expect_type: int, what: str) -> None:
    magic, version, kind, _ = _HEADER.unpack(_read_exact(f, _HEADER.size, "header"))
    if magic != MAGIC:
        raise DescriptorFormatError(f"not a descriptor container (bad magic {magic!r})")
    if version != CONTAINER_VERSION:
        raise VersionError(
            f"container version {version} not supported (this build reads {CONTAINER_VERSION})"
        )
    if kind != expect_type:
        raise DescriptorFormatError(f"container holds type {kind}, expected {what}")


def load_affordance_descriptor(path) -> AffordanceDescriptor:
    import json

    with open(path, "rb") as f:
        _check_header(f, _TYPE_SINGLE, "a single-affordance descriptor")
        affordance_id, n_per, bins, total, *offset = _FIXED.unpack(
            _read_exact(f, _FIXED.size, "descriptor header")
        )
        if bins != ORIENTATION_BINS:
            raise DescriptorFormatError(f"container uses {bins} orientation bins, expected {ORIENTATION_BINS}")
        label = _read_blob(f, "label").decode("utf-8")
        config = json.loads(_read_blob(f, "config").decode("utf-8") or "{}")
        raw = _read_exact(f, _RECORD.size * total, "keypoint records")
        rows = list(struct.iter_unpack(_RECORD.format, raw))
        trailing = f.read(1)
    if trailing:
        raise DescriptorFormatError("corrupt container: trailing bytes after keypoint records")
    arr = np.array([r[:7] for r in rows], dtype=np.float64).reshape(total, 7)
    return AffordanceDescriptor(
        affordance_id=affordance_id,
        label=label,
        keypoints_per_orientation=n_per,
        centroid_offset=np.array(offset),
        positions=arr[:, 0:3],
        provenances=arr[:, 3:6],
        weights=arr[:, 6],
        orientation_ids=np.array([r[7] for r in rows], dtype=np.int64),
        config=config,
    )


def dump_descriptor_text(d: AffordanceDescriptor, path) -> None:
    """Ascii debug dump, one keypoint per line."""
    with open(path, "w", encoding="ascii") as f:
        f.write(f"# affordance {d.affordance_id} label {d.label!r} "
                f"N {d.keypoints_per_orientation} bins {ORIENTATION_BINS}\n")
        f.write(f"# centroid_offset {d.centroid_offset.tolist()}\n")
        f.write("# x y z px py pz weight orientation\n")
        for i in range(len(d)):
            row = [*d.positions[i], *d.provenances[i], d.weights[i]]
            f.write(" ".join(repr(float(v)) for v in row) + f" {int(d.orientation_ids[i])}\n")
