"""PR sweeps, pairwise-preference fitting, ICP baseline."""

import numpy as np
import pytest

from affordkit import (
    JudgmentSet,
    PointCloud,
    Prediction,
    PredictionSet,
    fit_bradley_terry,
    icp_score,
    precision_recall,
)
from affordkit.errors import DataError, UsageError
from affordkit.evaluate import (
    read_judgments_csv,
    read_predictions_csv,
    write_pr_curve_csv,
    write_ranking_csv,
)

from oracles import brute_pr_curve


def prediction_set(rows, scene="s", source="multi"):
    return PredictionSet(scene, [Prediction(loc, k, s) for loc, k, s in rows], source)


def random_prediction_sets(rng, n_pred=None, n_truth=None, n_affordances=3):
    n_pred = n_pred or int(rng.integers(1, 25))
    n_truth = n_truth or int(rng.integers(1, 25))
    def rows(n):
        return [(rng.uniform(-1, 1, 3), int(rng.integers(0, n_affordances)),
                 float(rng.uniform(0, 1))) for _ in range(n)]
    return prediction_set(rows(n_pred)), prediction_set(rows(n_truth), source="single-baseline")


class TestPrecisionRecall:
    def test_identity_case(self):
        rng = np.random.default_rng(1)
        rows = [(rng.uniform(-1, 1, 3), int(rng.integers(0, 3)), float(rng.uniform(0, 1)))
                for _ in range(12)]
        pred = prediction_set(rows)
        truth = prediction_set(rows, source="single-baseline")
        result = precision_recall(pred, truth, 0.01)
        assert result.status == "ok"
        assert all(p == 1.0 for p in result.precisions)
        assert result.recalls[-1] == 1.0
        assert result.auc == pytest.approx(1.0, abs=1e-12)

    def test_half_overlap_counts(self):
        x1, x2, x3 = np.array([0.0, 0, 0]), np.array([1.0, 0, 0]), np.array([2.0, 0, 0])
        pred = prediction_set([(x1, 0, 0.9), (x2, 1, 0.8)])
        truth = prediction_set([(x2, 1, 1.0), (x3, 2, 1.0)], source="single-baseline")
        result = precision_recall(pred, truth, 0.05)
        assert result.precisions[-1] == 0.5
        assert result.recalls[-1] == 0.5

    def test_matches_brute_force_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pred, truth = random_prediction_sets(rng)
            radius = float(rng.uniform(0.05, 0.8))
            result = precision_recall(pred, truth, radius)
            curve, auc = brute_pr_curve(pred, truth, radius)
            assert len(result.thresholds) == len(curve)
            for (theta, r, p), rt, rr, rp in zip(
                    curve, result.thresholds, result.recalls, result.precisions):
                assert rt == theta
                assert rr == r
                assert rp == p
            assert result.auc == pytest.approx(auc, abs=1e-15)

    def test_empty_truth_status(self):
        pred = prediction_set([(np.zeros(3), 0, 0.5)])
        truth = PredictionSet("s", [], source="single-baseline")
        result = precision_recall(pred, truth, 0.1)
        assert result.status == "empty-truth"
        assert result.auc is None

    def test_empty_predictions_status(self):
        pred = PredictionSet("s", [])
        truth = prediction_set([(np.zeros(3), 0, 0.5)], source="single-baseline")
        result = precision_recall(pred, truth, 0.1)
        assert result.status == "empty-predictions"
        assert result.auc == 0.0

    def test_invariant_to_prediction_order(self):
        rng = np.random.default_rng(3)
        pred, truth = random_prediction_sets(rng, n_pred=15, n_truth=15)
        shuffled = PredictionSet(pred.scene_id, list(reversed(pred.predictions)))
        a = precision_recall(pred, truth, 0.3)
        b = precision_recall(shuffled, truth, 0.3)
        assert a.thresholds == b.thresholds
        assert a.precisions == b.precisions
        assert a.recalls == b.recalls

    def test_symmetric_under_affordance_relabeling(self):
        rng = np.random.default_rng(4)
        pred, truth = random_prediction_sets(rng, n_pred=20, n_truth=20)
        relabel = {0: 7, 1: 5, 2: 9}
        pred2 = PredictionSet(pred.scene_id, [
            Prediction(p.location, relabel[p.affordance_id], p.score)
            for p in pred.predictions])
        truth2 = PredictionSet(truth.scene_id, [
            Prediction(p.location, relabel[p.affordance_id], p.score)
            for p in truth.predictions], source="single-baseline")
        a = precision_recall(pred, truth, 0.3)
        b = precision_recall(pred2, truth2, 0.3)
        assert a.precisions == b.precisions and a.recalls == b.recalls

    def test_duplicate_pair_rejected(self):
        loc = np.zeros(3)
        with pytest.raises(DataError, match="duplicate"):
            prediction_set([(loc, 0, 0.5), (loc, 0, 0.6)])

    def test_scene_mismatch_rejected(self):
        pred = prediction_set([(np.zeros(3), 0, 0.5)], scene="a")
        truth = prediction_set([(np.zeros(3), 0, 0.5)], scene="b")
        with pytest.raises(DataError):
            precision_recall(pred, truth, 0.1)

    def test_non_positive_radius_rejected(self):
        pred = prediction_set([(np.zeros(3), 0, 0.5)])
        with pytest.raises(UsageError):
            precision_recall(pred, pred, 0.0)

    def test_curve_csv(self, tmp_path):
        rng = np.random.default_rng(5)
        pred, truth = random_prediction_sets(rng)
        result = precision_recall(pred, truth, 0.3)
        path = tmp_path / "curve.csv"
        write_pr_curve_csv(result, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "threshold,recall,precision"
        assert len(lines) == 1 + len(result.thresholds)


class TestBradleyTerry:
    def test_two_item_closed_form(self):
        judgments = JudgmentSet(items=["A", "B"],
                                comparisons=[("A", "B")] * 3 + [("B", "A")])
        ranking = fit_bradley_terry(judgments)
        ratio = ranking.strengths["A"] / ranking.strengths["B"]
        assert ratio == pytest.approx(3.0, abs=1e-6)
        assert ranking.converged

    def test_symmetric_items_equal_strengths(self):
        items = ["A", "B", "C", "D"]
        comparisons = []
        for i in range(4):
            for j in range(4):
                if i != j:
                    comparisons.append((items[i], items[j]))
        ranking = fit_bradley_terry(JudgmentSet(items=items, comparisons=comparisons))
        for item in items:
            assert ranking.strengths[item] == pytest.approx(0.25, abs=1e-9)

    def test_recovers_known_strengths(self):
        true = {"a": 1.0, "b": 2.0, "c": 4.0, "d": 8.0}
        items = list(true)
        recovered = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            comparisons = []
            for i in range(4):
                for j in range(i + 1, 4):
                    wi, wj = items[i], items[j]
                    p = true[wi] / (true[wi] + true[wj])
                    wins_i = rng.binomial(200, p)
                    comparisons += [(wi, wj)] * wins_i + [(wj, wi)] * (200 - wins_i)
            ranking = fit_bradley_terry(JudgmentSet(items=items, comparisons=comparisons))
            if ranking.ordering() == ["d", "c", "b", "a"]:
                recovered += 1
        assert recovered >= 19

    def test_strengths_normalized_and_positive(self):
        rng = np.random.default_rng(6)
        items = [f"i{k}" for k in range(6)]
        comparisons = [(items[rng.integers(6)], items[rng.integers(6)])
                       for _ in range(300)]
        comparisons = [(w, l) for w, l in comparisons if w != l]
        ranking = fit_bradley_terry(JudgmentSet(items=items, comparisons=comparisons))
        values = np.array(list(ranking.strengths.values()))
        assert (values > 0).all()
        assert values.sum() == pytest.approx(1.0, abs=1e-12)

    def test_initialization_invariance_via_scale(self):
        # predicted win probabilities depend only on strength ratios
        judgments = JudgmentSet(items=["A", "B", "C"],
                                comparisons=[("A", "B")] * 5 + [("B", "A")] * 2
                                + [("B", "C")] * 4 + [("C", "B")] * 3
                                + [("A", "C")] * 6 + [("C", "A")] * 1)
        r1 = fit_bradley_terry(judgments, tol=1e-12)
        r2 = fit_bradley_terry(judgments, tol=1e-14)
        for item in judgments.items:
            assert r1.strengths[item] == pytest.approx(r2.strengths[item], rel=1e-6)

    def test_zero_comparison_item_rejected(self):
        judgments = JudgmentSet(items=["A", "B", "C"], comparisons=[("A", "B")])
        with pytest.raises(DataError, match="zero comparisons"):
            fit_bradley_terry(judgments)

    def test_disconnected_components_fitted_with_notice(self, caplog):
        judgments = JudgmentSet(
            items=["A", "B", "C", "D"],
            comparisons=[("A", "B"), ("B", "A"), ("C", "D"), ("D", "C")])
        with caplog.at_level("WARNING"):
            ranking = fit_bradley_terry(judgments)
        assert len(ranking.components) == 2
        assert "components" in caplog.text

    def test_degenerate_all_wins_regularized(self, caplog):
        judgments = JudgmentSet(items=["A", "B"], comparisons=[("A", "B")] * 5)
        with caplog.at_level("WARNING"):
            ranking = fit_bradley_terry(judgments)
        assert ranking.regularized
        assert ranking.strengths["A"] > ranking.strengths["B"] > 0

    def test_self_comparison_rejected(self):
        with pytest.raises(DataError):
            JudgmentSet(items=["A"], comparisons=[("A", "A")])

    def test_judgments_csv(self, tmp_path):
        path = tmp_path / "j.csv"
        path.write_text("option_a,option_b,winner\nA,B,A\nA,B,A\nA,B,B\n")
        judgments = read_judgments_csv(path)
        assert judgments.items == ["A", "B"]
        assert judgments.comparisons == [("A", "B"), ("A", "B"), ("B", "A")]
        ranking = fit_bradley_terry(judgments)
        out = tmp_path / "r.csv"
        write_ranking_csv(ranking, out)
        assert out.read_text().splitlines()[0] == "item,strength"

    def test_judgments_csv_bad_winner(self, tmp_path):
        path = tmp_path / "j.csv"
        path.write_text("option_a,option_b,winner\nA,B,Z\n")
        with pytest.raises(DataError, match="winner"):
            read_judgments_csv(path)


def shape_cloud(seed, n=300):
    rng = np.random.default_rng(seed)
    blob = rng.normal(size=(n, 3)) * [0.2, 0.1, 0.15]
    wing = rng.uniform(-0.3, 0.3, size=(n // 3, 3)) * [1.0, 0.05, 0.02] + [0, 0.25, 0.1]
    return PointCloud(np.vstack([blob, wing]))


def rigid(angle_deg, translation):
    c, s = np.cos(np.radians(angle_deg)), np.sin(np.radians(angle_deg))
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    return rot, np.asarray(translation, dtype=np.float64)


class TestICP:
    def test_identity_case(self):
        template = shape_cloud(1)
        result = icp_score(template, template)
        assert result.residual == pytest.approx(0.0, abs=1e-12)
        assert result.score == pytest.approx(1.0, abs=1e-9)
        np.testing.assert_allclose(result.transform, np.eye(4), atol=1e-9)

    def test_known_transform_recovery(self):
        template = shape_cloud(2)
        rot, t = rigid(10.0, [0.05, 0.0, 0.0])
        candidate = PointCloud(template.points @ rot.T + t)
        result = icp_score(template, candidate)
        assert result.residual < 1e-3
        recovered = result.transform
        np.testing.assert_allclose(recovered[:3, :3] @ rot, np.eye(3), atol=1e-4)
        moved = candidate.points @ recovered[:3, :3].T + recovered[:3, 3]
        assert np.abs(moved - template.points).max() < 1e-3

    def test_dissimilar_shapes_much_worse(self):
        rng = np.random.default_rng(3)
        sphere = rng.normal(size=(400, 3))
        sphere = PointCloud(0.3 * sphere / np.linalg.norm(sphere, axis=1, keepdims=True))
        plane = PointCloud(np.column_stack([
            rng.uniform(-0.3, 0.3, 400), rng.uniform(-0.3, 0.3, 400), np.zeros(400)]))
        rot, t = rigid(10.0, [0.05, 0, 0])
        matched = icp_score(sphere, PointCloud(sphere.points @ rot.T + t))
        mismatched = icp_score(sphere, plane)
        assert mismatched.residual >= 10 * max(matched.residual, 1e-12)
        assert mismatched.score < matched.score

    def test_residual_invariant_under_common_transform(self):
        template = shape_cloud(4)
        rot, t = rigid(25.0, [0.1, -0.2, 0.3])
        candidate = PointCloud(template.points @ rigid(5.0, [0.02, 0, 0])[0].T + 0.01)
        base = icp_score(template, candidate)
        moved = icp_score(
            PointCloud(template.points @ rot.T + t),
            PointCloud(candidate.points @ rot.T + t))
        assert moved.residual == pytest.approx(base.residual, rel=1e-6, abs=1e-12)

    def test_non_convergence_flagged(self):
        template = shape_cloud(5)
        rot, t = rigid(160.0, [0.5, 0.5, 0.0])
        candidate = PointCloud(template.points @ rot.T + t)
        result = icp_score(template, candidate, max_iter=2)
        assert not result.converged
        assert result.iterations == 2

    def test_empty_cloud_rejected(self):
        with pytest.raises(DataError):
            icp_score(PointCloud(np.zeros((0, 3))), shape_cloud(6))

    def test_score_in_unit_interval(self):
        rng = np.random.default_rng(7)
        for seed in range(5):
            a, b = shape_cloud(seed), shape_cloud(seed + 50)
            result = icp_score(a, b, max_iter=10)
            assert 0.0 < result.score <= 1.0


class TestPredictionsCsv:
    def test_roundtrip_via_detection_csv(self, tmp_path):
        from affordkit.detect import Detection, write_detections_csv

        detections = [
            Detection(test_point=np.array([0.1, 0.2, 0.3]), test_point_index=4,
                      affordance_id=2, label="Place-book", orientation_id=1,
                      score=0.91, object_pose=np.eye(4)),
            Detection(test_point=np.array([0.5, 0.6, 0.7]), test_point_index=9,
                      affordance_id=0, label="Hang-bag", orientation_id=0,
                      score=0.74, object_pose=np.eye(4)),
        ]
        path = tmp_path / "d.csv"
        write_detections_csv(detections, "scene-1", path)
        pred = read_predictions_csv(path)
        assert pred.scene_id == "scene-1"
        assert len(pred) == 2
        assert pred.predictions[0].affordance_id == 2
        assert pred.predictions[0].score == 0.91
        np.testing.assert_array_equal(pred.predictions[0].location, [0.1, 0.2, 0.3])

    def test_missing_columns(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("scene,x,y\n")
        with pytest.raises(DataError, match="lacks columns"):
            read_predictions_csv(path)
