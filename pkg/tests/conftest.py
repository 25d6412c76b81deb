"""Shared synthetic fixtures.

Planted fixtures follow a clamp-over-terrain template: a two-blob
object grips a bumpy terrain patch, and a thin column of scene points
is planted through the descriptor's anchor so an exact test point
exists for self-detection. The overlap suite synthesizes many near-
duplicate descriptors directly from keypoints to exercise large-scale
agglomeration without running the bisector pipeline.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from affordkit import (
    AffordanceDescriptor,
    AgglomeratedDescriptor,
    InteractionExample,
    PointCloud,
    agglomerate,
)
from affordkit.tensor import AffordanceKeypoint, augment_descriptor, build_descriptor


def make_terrain(rng, extent=0.25, spacing=0.04, bumps=5, amp=0.2) -> np.ndarray:
    """Bumpy height-field patch centered on the origin."""
    xs = np.arange(-extent, extent + 1e-9, spacing)
    gx, gy = np.meshgrid(xs, xs)
    z = np.zeros_like(gx)
    for _ in range(bumps):
        cx, cy = rng.uniform(-extent, extent, 2)
        s = rng.uniform(0.08, 0.18)
        a = rng.uniform(-amp, amp)
        z += a * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2 * s * s))
    return np.stack([gx.ravel(), gy.ravel(), z.ravel()], axis=1)


@dataclass
class PlantedFixture:
    affordance_id: int
    label: str
    descriptor: AffordanceDescriptor
    scene: PointCloud
    query_object: PointCloud
    example: InteractionExample

    @property
    def anchor(self) -> np.ndarray:
        """Scene location where the descriptor reproduces its training."""
        return self.descriptor.centroid_offset


def make_clamp_fixture(i: int, n_keypoints: int = 256,
                       tensor_samples: int = 2048) -> PlantedFixture:
    """Clamp interaction over per-fixture terrain with an anchor column.

    Two passes: the first build locates the descriptor anchor, then the
    scene gains a thin column of points through it so the anchor is
    reachable from sampled test points, and the descriptor is rebuilt
    against the final scene.
    """
    rng = np.random.default_rng(1000 + i)
    terrain = make_terrain(rng)
    z_center = terrain[np.argmin(np.abs(terrain[:, 0]) + np.abs(terrain[:, 1])), 2]
    gap = rng.uniform(0.7, 0.95)
    cx, cy = rng.uniform(-0.12, 0.12, 2)
    top = rng.normal(scale=0.05, size=(60, 3)) + [cx, cy, z_center + gap]
    bottom = rng.normal(scale=0.05, size=(60, 3)) + [-cy * 0.5, cx * 0.8, z_center - gap]
    query_object = PointCloud(np.vstack([top, bottom]))
    label = f"Clamp-terrain{i}"

    first = InteractionExample(i, label, query_object, PointCloud(terrain), contact_bound=3.0)
    rough = build_descriptor(first, n_keypoints=n_keypoints,
                             tensor_samples=tensor_samples, seed=i)
    anchor = rough.centroid_offset

    col_z = anchor[2] + np.arange(-0.06, 0.0601, 0.003)
    column = np.stack([np.full_like(col_z, anchor[0]),
                       np.full_like(col_z, anchor[1]), col_z], axis=1)
    scene = PointCloud(np.vstack([terrain, column]))
    example = InteractionExample(i, label, query_object, scene, contact_bound=3.0)
    descriptor = build_descriptor(example, n_keypoints=n_keypoints,
                                  tensor_samples=tensor_samples, seed=i)
    return PlantedFixture(
        affordance_id=i, label=label, descriptor=descriptor,
        scene=scene, query_object=query_object, example=example,
    )


@pytest.fixture(scope="session")
def planted_fixtures() -> list[PlantedFixture]:
    return [make_clamp_fixture(i) for i in range(10)]


@pytest.fixture(scope="session")
def planted_agglomerated(planted_fixtures) -> AgglomeratedDescriptor:
    return agglomerate([f.descriptor for f in planted_fixtures], 0.01)


@pytest.fixture(scope="session")
def planted_small(planted_fixtures) -> AgglomeratedDescriptor:
    """Three-affordance agglomeration, cheap enough for unit tests."""
    return agglomerate([f.descriptor for f in planted_fixtures[:3]], 0.01)


def synth_sheet_descriptor(affordance_id: int, seed: int, n: int = 512,
                           base_rng_seed: int = 777, jitter: float = 0.002,
                           sheet: float = 0.2, height: float = 0.35) -> AffordanceDescriptor:
    """Descriptor synthesized straight from keypoints, no bisector run.

    All descriptors built from the same base_rng_seed share base
    keypoint positions up to jitter, which makes their agglomeration
    overlap-rich.
    """
    base_rng = np.random.default_rng(base_rng_seed)
    base_pos = np.column_stack([
        base_rng.uniform(-sheet, sheet, n),
        base_rng.uniform(-sheet, sheet, n),
        height + base_rng.normal(scale=0.01, size=n),
    ])
    base_prov = np.column_stack([
        base_rng.normal(scale=0.01, size=n),
        base_rng.normal(scale=0.01, size=n),
        -base_pos[:, 2],
    ])
    rng = np.random.default_rng(seed)
    pos = base_pos + rng.normal(scale=jitter, size=base_pos.shape)
    prov = base_prov + rng.normal(scale=jitter, size=base_prov.shape)
    keypoints = [
        AffordanceKeypoint(position=pos[j], provenance=prov[j],
                           weight=float(np.linalg.norm(prov[j])),
                           affordance_id=affordance_id, orientation_id=0)
        for j in range(n)
    ]
    return augment_descriptor(keypoints, label=f"Sheet-{affordance_id}")


@pytest.fixture(scope="session")
def overlap_descriptors() -> list[AffordanceDescriptor]:
    """84 near-duplicate descriptors, 4096 keypoints each."""
    return [synth_sheet_descriptor(k, seed=9000 + k) for k in range(84)]


@pytest.fixture(scope="session")
def bench_scene() -> PointCloud:
    rng = np.random.default_rng(5150)
    xs = np.arange(-0.5, 0.501, 0.025)
    gx, gy = np.meshgrid(xs, xs)
    z = 0.05 * np.sin(3 * gx) * np.cos(2 * gy) + rng.normal(scale=0.002, size=gx.shape)
    return PointCloud(np.stack([gx.ravel(), gy.ravel(), z.ravel()], axis=1))
