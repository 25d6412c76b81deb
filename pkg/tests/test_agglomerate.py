"""Grid clustering behavior and container round-trips."""

import numpy as np
import pytest

from affordkit import (
    KeypointSet,
    agglomerate,
    load_agglomerated_descriptor,
    save_agglomerated_descriptor,
)
from affordkit.agglomerate import write_manifest
from affordkit.errors import DataError, DescriptorFormatError, UsageError, VersionError
from affordkit.tensor import ORIENTATION_BINS

from oracles import brute_algorithm1


def keypoint_set(positions, affordance_id=0, orientations=None, label="",
                 aligned=True, seed=0):
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    rng = np.random.default_rng(seed)
    prov = rng.normal(size=(n, 3)) * 0.1
    if orientations is None:
        orientations = np.zeros(n, dtype=np.int64)
    return KeypointSet(
        affordance_id=affordance_id,
        label=label or f"aff-{affordance_id}",
        positions=positions,
        provenances=prov,
        weights=np.linalg.norm(prov, axis=1),
        orientation_ids=np.asarray(orientations, dtype=np.int64),
        centroid_offset=np.zeros(3),
        aligned_frame=aligned,
    )


def random_instance(rng, max_affordances=5, max_keypoints=2000):
    """Random keypoint population over a handful of affordances."""
    n_aff = int(rng.integers(1, max_affordances + 1))
    sets = []
    total = int(rng.integers(n_aff, max_keypoints + 1))
    splits = np.sort(rng.choice(np.arange(1, total), size=n_aff - 1, replace=False)) \
        if n_aff > 1 else np.array([], dtype=int)
    counts = np.diff(np.concatenate([[0], splits, [total]]))
    for k, count in enumerate(counts):
        pos = rng.uniform(-0.5, 0.5, size=(int(count), 3))
        orients = rng.integers(0, ORIENTATION_BINS, size=int(count))
        sets.append(keypoint_set(pos, affordance_id=k, orientations=orients,
                                 seed=int(rng.integers(1 << 31))))
    span = 1.0
    cell = float(rng.uniform(span / 12, span / 3))
    return sets, cell


def assert_matches_oracle(result, sets, cell_size, mode):
    positions = np.vstack([s.positions for s in sets])
    affs = np.concatenate([np.full(len(s.positions), s.affordance_id) for s in sets])
    orients = np.concatenate([s.orientation_ids for s in sets])
    expected = brute_algorithm1(positions, affs, orients, cell_size, mode=mode)

    assert len(result.cells) == len(expected)
    for cell, ref in zip(result.cells, expected):
        np.testing.assert_allclose(cell.centroid, ref["centroid"], atol=1e-12)
        got_keys = [(e.affordance_id, e.orientation_id) for e in cell.entries]
        assert got_keys == sorted(ref["entries"])
        for entry in cell.entries:
            ref_entry = ref["entries"][(entry.affordance_id, entry.orientation_id)]
            assert entry.member_count == ref_entry["members"]
            want = np.asarray(sorted(map(tuple, positions[ref_entry["kept"]])))
            got = np.asarray(sorted(map(tuple, entry.positions)))
            np.testing.assert_array_equal(got, want)


class TestAlgorithmExamples:
    def test_hand_executed_single_cell(self):
        # One cell holding affordance A at two positions and B at one;
        # kept set and updated centroid computed by hand.
        a = keypoint_set([[0.004, 0.005, 0.005], [0.009, 0.001, 0.001]], affordance_id=0)
        b = keypoint_set([[0.006, 0.005, 0.005]], affordance_id=1)
        result = agglomerate([a, b], 0.01)
        assert len(result.cells) == 1
        cell = result.cells[0]
        kept = {(e.affordance_id): tuple(e.positions[0]) for e in cell.entries}
        assert kept[0] == (0.004, 0.005, 0.005)
        assert kept[1] == (0.006, 0.005, 0.005)
        np.testing.assert_allclose(cell.centroid, [0.005, 0.005, 0.005], atol=1e-12)

    def test_single_affordance_single_cell(self):
        s = keypoint_set([[0.001, 0.001, 0.0], [0.003, 0.002, 0.0], [0.002, 0.004, 0.0]])
        result = agglomerate([s], 0.01)
        assert len(result.cells) == 1
        entry = result.cells[0].entries[0]
        assert entry.kept_count == 1
        assert entry.member_count == 3
        np.testing.assert_array_equal(result.cells[0].centroid, entry.positions[0])

    def test_matches_oracle_small(self):
        rng = np.random.default_rng(100)
        for _ in range(10):
            sets, cell = random_instance(rng, max_keypoints=300)
            for mode in ("closest", "all"):
                result = agglomerate(sets, cell, mode=mode)
                assert_matches_oracle(result, sets, cell, mode)

    def test_keypoint_tie_goes_to_lowest_index(self):
        # Affordance-1 keypoints pin the bounding box so the seed centroid
        # sits at (0.005, 0.005, 0.005); affordance-0 keypoints are then
        # exactly equidistant from it and the first one must win.
        tied = keypoint_set([[0.002, 0.005, 0.005], [0.008, 0.005, 0.005]],
                            affordance_id=0)
        frame = keypoint_set([[0.0, 0.0, 0.0], [0.01, 0.01, 0.01]], affordance_id=1)
        result = agglomerate([tied, frame], 0.01)
        assert len(result.cells) == 1
        entry = [e for e in result.cells[0].entries if e.affordance_id == 0][0]
        np.testing.assert_array_equal(entry.positions[0], [0.002, 0.005, 0.005])


class TestModes:
    def test_all_mode_preserves_count(self):
        rng = np.random.default_rng(101)
        sets, cell = random_instance(rng, max_keypoints=600)
        total = sum(len(s.positions) for s in sets)
        result = agglomerate(sets, cell, mode="all")
        assert result.kept_keypoint_count() == total
        assert result.member_count() == total

    def test_closest_mode_keeps_one_per_group(self):
        rng = np.random.default_rng(102)
        sets, cell = random_instance(rng, max_keypoints=600)
        result = agglomerate(sets, cell, mode="closest")
        for c in result.cells:
            keys = [(e.affordance_id, e.orientation_id) for e in c.entries]
            assert len(keys) == len(set(keys))
            for e in c.entries:
                assert e.kept_count == 1

    def test_mode_aliases(self):
        s = keypoint_set([[0.0, 0.0, 0.0]])
        assert agglomerate([s], 0.01, mode="closest-per-affordance").mode == "closest"
        assert agglomerate([s], 0.01, mode="it-all").mode == "all"


class TestInvariants:
    def test_centroid_is_mean_of_kept(self):
        rng = np.random.default_rng(103)
        for mode in ("closest", "all"):
            sets, cell = random_instance(rng, max_keypoints=800)
            result = agglomerate(sets, cell, mode=mode)
            for c in result.cells:
                kept = np.vstack([e.positions for e in c.entries])
                np.testing.assert_allclose(c.centroid, kept.mean(axis=0), atol=1e-9)

    def test_every_keypoint_represented_once(self):
        rng = np.random.default_rng(104)
        sets, cell = random_instance(rng, max_keypoints=500)
        result = agglomerate(sets, cell, mode="all")
        total = sum(len(s.positions) for s in sets)
        members = sum(e.member_count for c in result.cells for e in c.entries)
        assert members == total

    def test_centroid_count_non_increasing_in_cell_size(self):
        rng = np.random.default_rng(105)
        sets, _ = random_instance(rng, max_keypoints=1500)
        counts = [len(agglomerate(sets, e)) for e in (0.05, 0.1, 0.2, 0.4)]
        assert counts == sorted(counts, reverse=True)

    def test_no_empty_cells(self):
        rng = np.random.default_rng(106)
        sets, cell = random_instance(rng)
        result = agglomerate(sets, cell)
        assert all(c.entries for c in result.cells)


class TestValidation:
    def test_empty_list_rejected(self):
        with pytest.raises(DataError):
            agglomerate([], 0.01)

    def test_non_positive_cell_rejected(self):
        with pytest.raises(UsageError):
            agglomerate([keypoint_set([[0, 0, 0]])], 0.0)

    def test_non_zero_meaned_rejected(self):
        shifted = keypoint_set(np.random.default_rng(0).normal(size=(50, 3)) + 5.0,
                               aligned=False)
        with pytest.raises(DataError, match="zero-mean"):
            agglomerate([shifted], 0.1)

    def test_unknown_mode_rejected(self):
        with pytest.raises(UsageError):
            agglomerate([keypoint_set([[0, 0, 0]])], 0.01, mode="median")


class TestContainer:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(107)
        sets, cell = random_instance(rng, max_keypoints=400)
        result = agglomerate(sets, cell, mode="all", config={"cell_size_m": cell})
        path = tmp_path / "agg.amd"
        save_agglomerated_descriptor(result, path)
        back = load_agglomerated_descriptor(path)
        assert back.equals(result)

    def test_truncated(self, tmp_path):
        result = agglomerate([keypoint_set(np.random.default_rng(1).normal(size=(30, 3)) * 0.1)], 0.05)
        path = tmp_path / "agg.amd"
        save_agglomerated_descriptor(result, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-10])
        with pytest.raises(DescriptorFormatError, match="truncated"):
            load_agglomerated_descriptor(path)

    def test_version_error(self, tmp_path):
        result = agglomerate([keypoint_set([[0.0, 0.0, 0.0]])], 0.05)
        path = tmp_path / "agg.amd"
        save_agglomerated_descriptor(result, path)
        raw = bytearray(path.read_bytes())
        raw[4] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_agglomerated_descriptor(path)

    def test_wrong_container_type(self, tmp_path):
        from affordkit import save_affordance_descriptor
        from affordkit.tensor import AffordanceKeypoint, augment_descriptor

        rng = np.random.default_rng(2)
        kps = [AffordanceKeypoint(position=rng.normal(size=3),
                                  provenance=rng.normal(size=3),
                                  weight=1.0, affordance_id=0) for _ in range(8)]
        path = tmp_path / "single.afd"
        save_affordance_descriptor(augment_descriptor(kps), path)
        with pytest.raises(DescriptorFormatError, match="type"):
            load_agglomerated_descriptor(path)

    def test_manifest(self, tmp_path):
        a = keypoint_set([[0.0, 0.0, 0.0]], affordance_id=2, label="Hang-bag")
        result = agglomerate([a], 0.05)
        path = tmp_path / "agg.manifest.txt"
        write_manifest(result, path)
        text = path.read_text()
        assert "affordance 2 Hang-bag" in text
        assert "cells 1" in text
