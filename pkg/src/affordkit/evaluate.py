"""Evaluation machinery: PR curves, pairwise-preference ranking, ICP.

precision_recall compares a scored prediction set against a reference
set by sweeping the score threshold; fit_bradley_terry turns pairwise
human judgments into item strengths; icp_score is the naive rigid
alignment baseline detections are compared against.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import PointCloud
from .errors import DataError, UsageError

log = logging.getLogger(__name__)

PREDICTION_SOURCES = ("multi", "single-baseline", "icp")


@dataclass
class Prediction:
    location: np.ndarray
    affordance_id: int
    score: float = 1.0

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=np.float64).reshape(3)


@dataclass
class PredictionSet:
    scene_id: str
    predictions: list[Prediction]
    source: str = "multi"

    def __post_init__(self):
        if self.source not in PREDICTION_SOURCES:
            raise UsageError(f"unknown source {self.source!r}; expected one of {PREDICTION_SOURCES}")
        seen = set()
        for p in self.predictions:
            key = (tuple(p.location), p.affordance_id)
            if key in seen:
                raise DataError(f"duplicate (location, affordance) pair {key} in {self.scene_id!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.predictions)


def match_predictions(active: list[Prediction], truth: list[Prediction],
                      match_radius: float) -> int:
    """One-to-one greedy matching by distance; returns the match count.

    A prediction can match a truth entry only with the same affordance
    id within match_radius. Candidate pairs are consumed nearest-first,
    ties broken by (prediction index, truth index).
    """
    pairs = []
    for i, p in enumerate(active):
        for j, t in enumerate(truth):
            if p.affordance_id != t.affordance_id:
                continue
            d = float(np.linalg.norm(p.location - t.location))
            if d <= match_radius:
                pairs.append((d, i, j))
    pairs.sort()
    used_p: set[int] = set()
    used_t: set[int] = set()
    matches = 0
    for _, i, j in pairs:
        if i in used_p or j in used_t:
            continue
        used_p.add(i)
        used_t.add(j)
        matches += 1
    return matches


@dataclass
class PRResult:
    status: str  # ok | empty-truth | empty-predictions
    thresholds: list[float] = field(default_factory=list)
    precisions: list[float] = field(default_factory=list)
    recalls: list[float] = field(default_factory=list)
    auc: float | None = None

    def curve(self) -> list[tuple[float, float, float]]:
        return list(zip(self.thresholds, self.recalls, self.precisions))


def precision_recall(pred: PredictionSet, truth: PredictionSet,
                     match_radius: float) -> PRResult:
    """Threshold-sweep precision/recall with trapezoidal AUC.

    Thresholds are the unique prediction scores, descending. At each
    threshold the active predictions are greedily matched one-to-one
    against the full truth set. The AUC integrates the swept curve over
    recall, anchored at (recall 0, first precision).
    """
    if match_radius <= 0:
        raise UsageError("match_radius must be positive")
    if pred.scene_id != truth.scene_id:
        raise DataError(f"scene mismatch: {pred.scene_id!r} vs {truth.scene_id!r}")
    if not len(truth):
        return PRResult(status="empty-truth")
    if not len(pred):
        return PRResult(status="empty-predictions", auc=0.0)

    thresholds = sorted({p.score for p in pred.predictions}, reverse=True)
    precisions, recalls = [], []
    for theta in thresholds:
        active = [p for p in pred.predictions if p.score >= theta]
        tp = match_predictions(active, truth.predictions, match_radius)
        precisions.append(tp / len(active))
        recalls.append(tp / len(truth))

    auc = 0.0
    prev_r, prev_p = 0.0, precisions[0]
    for r, p in zip(recalls, precisions):
        auc += (r - prev_r) * (p + prev_p) / 2.0
        prev_r, prev_p = r, p
    return PRResult(status="ok", thresholds=thresholds,
                    precisions=precisions, recalls=recalls, auc=auc)


def write_pr_curve_csv(result: PRResult, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["threshold", "recall", "precision"])
        for theta, r, p in result.curve():
            writer.writerow([repr(theta), repr(r), repr(p)])


def read_predictions_csv(path, source: str = "multi") -> PredictionSet:
    """Build a PredictionSet from a detection CSV (see detect module)."""
    predictions = []
    scene_id = ""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"scene", "x", "y", "z", "affordance_id", "score"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"prediction CSV lacks columns {sorted(missing)}")
        for row in reader:
            scene_id = row["scene"]
            predictions.append(Prediction(
                location=[float(row["x"]), float(row["y"]), float(row["z"])],
                affordance_id=int(row["affordance_id"]),
                score=float(row["score"]),
            ))
    return PredictionSet(scene_id=scene_id, predictions=predictions, source=source)


# ------------------------------------------------------ Bradley-Terry

@dataclass
class JudgmentSet:
    items: list
    comparisons: list[tuple]  # (winner, loser)

    def __post_init__(self):
        items = set(self.items)
        if len(items) != len(self.items):
            raise DataError("duplicate items in judgment set")
        for w, l in self.comparisons:
            if w == l:
                raise DataError(f"self-comparison on item {w!r}")
            if w not in items or l not in items:
                raise DataError(f"comparison ({w!r}, {l!r}) names unknown items")


@dataclass
class Ranking:
    strengths: dict  # item -> strength, positive, summing to 1
    log_likelihood: float
    iterations: int
    converged: bool
    components: list[list]
    regularized: bool

    def ordering(self) -> list:
        return sorted(self.strengths, key=lambda i: -self.strengths[i])


def _components(items, comparisons):
    adjacency = {i: set() for i in items}
    for w, l in comparisons:
        adjacency[w].add(l)
        adjacency[l].add(w)
    seen, comps = set(), []
    for start in items:
        if start in seen:
            continue
        stack, comp = [start], []
        seen.add(start)
        while stack:
            node = stack.pop()
            comp.append(node)
            for nxt in adjacency[node]:
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        comps.append(comp)
    return comps


def _log_likelihood(wins: np.ndarray, pi: np.ndarray) -> float:
    n = len(pi)
    ll = 0.0
    for i in range(n):
        for j in range(n):
            if wins[i, j] > 0:
                ll += wins[i, j] * np.log(pi[i] / (pi[i] + pi[j]))
    return float(ll)


def fit_bradley_terry(judgments: JudgmentSet, tol: float = 1e-10,
                      max_iter: int = 10_000) -> Ranking:
    """Maximum-likelihood strengths via minorization updates.

    Disconnected comparison graphs are fitted per component with a
    notice (cross-component ratios are arbitrary). An item with no
    losses or no wins inside its component makes the likelihood
    unbounded; when detected, half a win is added to both directions of
    every observed pair and the result is flagged as regularized.
    """
    items = list(judgments.items)
    index = {item: i for i, item in enumerate(items)}
    n = len(items)
    wins = np.zeros((n, n))
    for w, l in judgments.comparisons:
        wins[index[w], index[l]] += 1.0

    totals = wins.sum(axis=1) + wins.sum(axis=0)
    silent = [items[i] for i in range(n) if totals[i] == 0]
    if silent:
        raise DataError(f"items with zero comparisons: {silent}")

    comps = _components(items, judgments.comparisons)
    if len(comps) > 1:
        log.warning("comparison graph has %d components; fitting each separately", len(comps))

    strengths = np.zeros(n)
    total_ll = 0.0
    iterations = 0
    converged = True
    regularized = False

    for comp in comps:
        idx = np.array([index[i] for i in comp])
        w = wins[np.ix_(idx, idx)].copy()
        m = len(idx)
        if m == 1:
            strengths[idx[0]] = 1.0
            continue
        degenerate = ((w.sum(axis=1) == 0) | (w.sum(axis=0) == 0)).any()
        if degenerate:
            regularized = True
            games = w + w.T
            observed = games > 0
            w[observed] += 0.5
            log.warning("degenerate win pattern; added half a win to each observed pair")

        games = w + w.T
        pi = np.ones(m)
        ll_prev = _log_likelihood(w, pi)
        it = 0
        for it in range(1, max_iter + 1):
            denom = np.zeros(m)
            for i in range(m):
                mask = games[i] > 0
                denom[i] = (games[i, mask] / (pi[i] + pi[mask])).sum()
            pi_new = w.sum(axis=1) / denom
            pi_new /= pi_new.sum()
            change = np.abs(pi_new - pi) / pi
            pi = pi_new
            ll = _log_likelihood(w, pi)
            if ll < ll_prev - 1e-9:
                log.warning("likelihood decreased by %.3e at iteration %d", ll_prev - ll, it)
            ll_prev = ll
            if change.max() < tol:
                break
        else:
            converged = False
        iterations = max(iterations, it)
        total_ll += ll_prev
        strengths[idx] = pi * len(comp)

    strengths /= strengths.sum()
    return Ranking(
        strengths={items[i]: float(strengths[i]) for i in range(n)},
        log_likelihood=total_ll,
        iterations=iterations,
        converged=converged,
        components=comps,
        regularized=regularized,
    )


def read_judgments_csv(path) -> JudgmentSet:
    """CSV columns: option_a, option_b, winner."""
    items: list = []
    seen = set()
    comparisons = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        required = {"option_a", "option_b", "winner"}
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"judgments CSV lacks columns {sorted(missing)}")
        for lineno, row in enumerate(reader, start=2):
            a, b, w = row["option_a"].strip(), row["option_b"].strip(), row["winner"].strip()
            if w not in (a, b):
                raise DataError(f"winner {w!r} is neither option (line {lineno})")
            for item in (a, b):
                if item not in seen:
                    seen.add(item)
                    items.append(item)
            comparisons.append((w, a if w == b else b))
    return JudgmentSet(items=items, comparisons=comparisons)


def write_ranking_csv(ranking: Ranking, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["item", "strength"])
        for item in ranking.ordering():
            writer.writerow([item, repr(ranking.strengths[item])])


# ---------------------------------------------------------------- ICP

@dataclass
class ICPResult:
    transform: np.ndarray  # 4x4 mapping candidate onto template
    residual: float  # RMS nearest-neighbor distance after alignment
    score: float  # exp(-residual / sigma), sigma = template diag / 20
    converged: bool
    iterations: int


def _kabsch(source: np.ndarray, target: np.ndarray):
    sc, tc = source.mean(axis=0), target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, tc - rot @ sc


def icp_score(template: PointCloud, candidate: PointCloud,
              max_iter: int = 60, tol: float = 1e-9) -> ICPResult:
    """Point-to-point ICP aligning candidate onto template.

    The returned transform undoes whatever rigid motion separates the
    clouds; residual is the RMS distance from transformed candidate
    points to their template nearest neighbors. Hitting max_iter
    without the residual settling returns the best transform found,
    flagged as not converged.
    """
    if not len(template) or not len(candidate):
        raise DataError("ICP needs two non-empty clouds")
    tree = cKDTree(template.points)
    src = candidate.points
    rot = np.eye(3)
    trans = np.zeros(3)
    best = (np.inf, rot, trans)
    prev_residual = np.inf
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        moved = src @ rot.T + trans
        dists, idx = tree.query(moved)
        residual = float(np.sqrt((dists ** 2).mean()))
        if residual < best[0]:
            best = (residual, rot.copy(), trans.copy())
        if abs(prev_residual - residual) < tol:
            converged = True
            break
        prev_residual = residual
        rot, trans = _kabsch(src, template.points[idx])

    residual, rot, trans = best
    lo, hi = template.bounds()
    diag = float(np.linalg.norm(hi - lo))
    sigma = diag / 20.0 if diag > 0 else 1.0
    transform = np.eye(4)
    transform[:3, :3] = rot
    transform[:3, 3] = trans
    return ICPResult(
        transform=transform,
        residual=residual,
        score=float(np.exp(-residual / sigma)),
        converged=converged,
        iterations=it,
    )
