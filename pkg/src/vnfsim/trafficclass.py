"""HD/NHD traffic classification: cluster to bootstrap labels, then learn a classifier.

Two presets mirror the compared pipelines: ``aggo+dt`` (Ward agglomerative
clustering feeding a CART tree) and ``kmeans+lr`` (k-means feeding logistic
regression).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Sequence

import numpy as np

from .errors import DegenerateClusters, SingleClassInput, TooFewPoints
from .workload import SfcRequest, cumulative_load, profile_stats

FEATURE_NAMES = (
    "mean_load", "peak_load", "cumulative_volume", "popularity", "qos_stringency", "lifetime",
)
VOLUME_INDEX = 2
PRESETS = ("aggo+dt", "kmeans+lr", "off")


class DemandLabel(IntEnum):
    NHD = 0
    HD = 1


@dataclass
class ClassifierConfig:
    preset: str = "aggo+dt"
    window: int = 200
    refresh_episodes: int = 50
    volume_window: float = 60.0
    volume_dt: float = 1.0
    max_depth: int = 4
    min_samples_leaf: int = 5
    lr: float = 0.1
    epochs: int = 500
    kmeans_max_iter: int = 100


def service_features(sfc: SfcRequest, qos_stringency: float, cfg: ClassifierConfig) -> np.ndarray:
    mean_load, peak_load = profile_stats(sfc.traffic_profile)
    # packets seen over a fixed observation frame, scaled by how many users request it
    volume = sfc.popularity * cumulative_load(sfc.traffic_profile, 0.0, cfg.volume_window, cfg.volume_dt)
    return np.array([mean_load, peak_load, volume, sfc.popularity, qos_stringency, sfc.lifetime])


# -- clustering ------------------------------------------------------------------

def _wcss(points: np.ndarray, assign: np.ndarray, centroids: np.ndarray) -> float:
    return float(((points - centroids[assign]) ** 2).sum())


def kmeans(
    points, k: int, rng: np.random.Generator, max_iter: int = 100, history: list | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm with k-means++ seeding.

    If ``history`` is given, the WCSS after every assignment and update step
    is appended to it.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    # k-means++ seeding
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(0, n))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = pts[int(rng.integers(0, n))]
        else:
            centroids[c] = pts[int(rng.choice(n, p=d2 / total))]
        d2 = np.minimum(d2, ((pts - centroids[c]) ** 2).sum(axis=1))

    assign = np.full(n, -1)
    for _ in range(max_iter):
        dist = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_assign = dist.argmin(axis=1)
        if history is not None:
            history.append(_wcss(pts, new_assign, centroids))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
        if history is not None:
            history.append(_wcss(pts, assign, centroids))
    return assign, centroids


def agglomerative(points, k: int) -> np.ndarray:
    """Ward-linkage bottom-up clustering down to ``k`` clusters.

    Merge cost is the SSE increase n_a n_b / (n_a + n_b) |c_a - c_b|^2; equal
    costs merge the lowest (i, j) pair first. Labels are numbered by first
    appearance in input order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = pts.shape[0]
    if k < 1 or n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    centroids = pts.copy()
    sizes = np.ones(n)
    members: list[list[int] | None] = [[i] for i in range(n)]
    cost = np.full((n, n), np.inf)
    iu = np.triu_indices(n, 1)
    diff = pts[iu[0]] - pts[iu[1]]
    cost[iu] = 0.5 * (diff * diff).sum(axis=1)
    alive = n
    while alive > k:
        flat = int(np.argmin(cost))
        i, j = divmod(flat, n)  # i < j: only the upper triangle is finite
        ni, nj = sizes[i], sizes[j]
        centroids[i] = (ni * centroids[i] + nj * centroids[j]) / (ni + nj)
        sizes[i] = ni + nj
        members[i].extend(members[j])  # type: ignore[union-attr]
        members[j] = None
        cost[j, :] = np.inf
        cost[:, j] = np.inf
        others = np.array([m for m in range(n) if members[m] is not None and m != i], dtype=int)
        if others.size:
            d = ((centroids[others] - centroids[i]) ** 2).sum(axis=1)
            c = sizes[others] * sizes[i] / (sizes[others] + sizes[i]) * d
            lo = others < i
            cost[others[lo], i] = c[lo]
            cost[i, others[~lo]] = c[~lo]
        alive -= 1
    assign = np.empty(n, dtype=int)
    groups = sorted((min(m), m) for m in members if m is not None)
    for label, (_, m) in enumerate(groups):
        assign[m] = label
    return assign


def bootstrap_labels(assignments, features) -> np.ndarray:
    """HD for the cluster with the larger mean cumulative volume.

    Equal means: the cluster holding the single largest volume is HD.
    """
    assign = np.asarray(assignments)
    feats = np.asarray(features, dtype=np.float64)
    vol = feats[:, VOLUME_INDEX] if feats.ndim == 2 else feats
    clusters = sorted(set(assign.tolist()))
    if len(clusters) != 2:
        raise DegenerateClusters(f"expected 2 non-empty clusters, got {len(clusters)}")
    a, b = clusters
    ma, mb = vol[assign == a].mean(), vol[assign == b].mean()
    if ma == mb:
        hd = assign[int(np.argmax(vol))]
    else:
        hd = a if ma > mb else b
    return np.where(assign == hd, DemandLabel.HD, DemandLabel.NHD).astype(int)


# -- decision tree ---------------------------------------------------------------

@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: "TreeNode | None" = None
    right: "TreeNode | None" = None
    label: int = 0

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass
class TreeModel:
    root: TreeNode
    max_depth: int
    single_class: bool = False

    def depth(self) -> int:
        def _d(node):
            return 0 if node.is_leaf else 1 + max(_d(node.left), _d(node.right))
        return _d(self.root)

    def table(self) -> list[tuple[int, float, int, int, int]]:
        """Flattened node table: (feature, threshold, left, right, label); leaves have feature -1."""
        rows: list = []

        def _emit(node) -> int:
            idx = len(rows)
            rows.append(None)
            if node.is_leaf:
                rows[idx] = (-1, 0.0, -1, -1, node.label)
            else:
                left = _emit(node.left)
                right = _emit(node.right)
                rows[idx] = (node.feature, node.threshold, left, right, node.label)
            return idx

        _emit(self.root)
        return rows

    def dump(self) -> str:
        lines = [f"tree max_depth={self.max_depth} single_class={int(self.single_class)}"]
        for i, (f, t, l, r, lab) in enumerate(self.table()):
            if f < 0:
                lines.append(f"{i} leaf {DemandLabel(lab).name}")
            else:
                lines.append(f"{i} split x[{f}] <= {t!r} ? {l} : {r}")
        return "\n".join(lines)


def _gini(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return float(1.0 - (p * p).sum())


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    n, d = x.shape
    parent = _gini(np.bincount(y, minlength=2)) * n
    best = (0.0, -1, 0.0)
    for f in range(d):
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        left_hd = np.cumsum(ys)[:-1].astype(np.float64)
        nl = np.arange(1, n, dtype=np.float64)
        nr = n - nl
        right_hd = ys.sum() - left_hd
        gl = 1.0 - (left_hd / nl) ** 2 - (1 - left_hd / nl) ** 2
        gr = 1.0 - (right_hd / nr) ** 2 - (1 - right_hd / nr) ** 2
        gain = parent - (nl * gl + nr * gr)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        pos = int(np.argmax(gain))
        if gain[pos] > best[0] + 1e-12:
            best = (float(gain[pos]), f, float((xs[pos] + xs[pos + 1]) / 2.0))
    return best


def _majority(y: np.ndarray) -> int:
    counts = np.bincount(y, minlength=2)
    # ties go to HD so a balanced leaf errs on the safe (full reservation) side
    return int(DemandLabel.HD) if counts[1] >= counts[0] else int(DemandLabel.NHD)


def train_tree(x, y, max_depth: int = 4, min_samples_leaf: int = 5) -> TreeModel:
    """Greedy CART on Gini impurity. A single-class input yields a flagged constant tree."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=int)
    if len(y) < 2:
        raise SingleClassInput("need at least two samples")

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        ys = y[idx]
        node = TreeNode(label=_majority(ys))
        if depth >= max_depth or len(set(ys.tolist())) < 2 or len(idx) < 2 * min_samples_leaf:
            return node
        gain, f, thr = _best_split(x[idx], ys, min_samples_leaf)
        if f < 0 or gain <= 0:
            return node
        mask = x[idx, f] <= thr
        node.feature, node.threshold = f, thr
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    single = len(set(y.tolist())) < 2
    return TreeModel(build(np.arange(len(y)), 0), max_depth, single_class=single)


def tree_predict(model: TreeModel, features) -> int:
    node = model.root
    while not node.is_leaf:
        node = node.left if features[node.feature] <= node.threshold else node.right
    return node.label


# -- logistic regression ------------------------------------------------------

@dataclass
class LogisticModel:
    weights: np.ndarray
    bias: float = 0.0
    single_class: bool = False
    loss_history: list[float] = field(default_factory=list)

    def prob(self, x) -> np.ndarray | float:
        z = np.asarray(x, dtype=np.float64) @ self.weights + self.bias
        return 1.0 / (1.0 + np.exp(-np.clip(z, -500, 500)))

    def dump(self) -> str:
        w = " ".join(repr(float(v)) for v in self.weights)
        return f"logistic bias={self.bias!r}\nweights {w}"


def cross_entropy(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray) -> float:
    z = x @ weights + bias
    # log(1 + e^z) - y z, written stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def cross_entropy_grad(weights: np.ndarray, bias: float, x: np.ndarray, y: np.ndarray):
    p = 1.0 / (1.0 + np.exp(-np.clip(x @ weights + bias, -500, 500)))
    r = (p - y) / len(y)
    return x.T @ r, float(r.sum())


def train_logistic(x, y, epochs: int = 500, lr: float = 0.1) -> LogisticModel:
    """Full-batch gradient descent; the step is halved (and rejected) whenever loss rises."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64)
    if len(y) < 2:
        raise SingleClassInput("need at least two samples")
    model = LogisticModel(np.zeros(x.shape[1]), 0.0, single_class=len(set(y.tolist())) < 2)
    loss = cross_entropy(model.weights, model.bias, x, y)
    model.loss_history.append(loss)
    for _ in range(epochs):
        gw, gb = cross_entropy_grad(model.weights, model.bias, x, y)
        while True:
            w_new = model.weights - lr * gw
            b_new = model.bias - lr * gb
            new_loss = cross_entropy(w_new, b_new, x, y)
            if new_loss <= loss or lr < 1e-12:
                break
            lr *= 0.5
        model.weights, model.bias, loss = w_new, b_new, new_loss
        model.loss_history.append(loss)
    return model


def classify(model: TreeModel | LogisticModel, features) -> DemandLabel:
    if isinstance(model, TreeModel):
        return DemandLabel(tree_predict(model, features))
    return DemandLabel.HD if float(model.prob(features)) >= 0.5 else DemandLabel.NHD


# -- online pipeline -----------------------------------------------------------

class TrafficClassifier:
    """Windowed bootstrap-and-train classifier used by the simulator.

    Until the first window fills, every service is reported HD (full
    reservation is the conservative default).
    """

    def __init__(self, cfg: ClassifierConfig):
        if cfg.preset not in PRESETS:
            raise ValueError(f"unknown classifier preset {cfg.preset!r}")
        self.cfg = cfg
        self.window: list[np.ndarray] = []
        self.model: TreeModel | LogisticModel | None = None
        self.mu: np.ndarray | None = None
        self.sd: np.ndarray | None = None
        self.episodes_since_fit = 0
        self.fits = 0

    @property
    def enabled(self) -> bool:
        return self.cfg.preset != "off"

    def observe(self, feats: np.ndarray) -> None:
        if not self.enabled:
            return
        self.window.append(feats)
        if len(self.window) > self.cfg.window:
            del self.window[0]

    def end_episode(self, rng: np.random.Generator) -> None:
        if not self.enabled:
            return
        self.episodes_since_fit += 1
        ready = len(self.window) >= self.cfg.window
        if ready and (self.model is None or self.episodes_since_fit >= self.cfg.refresh_episodes):
            self.refit(rng)

    def refit(self, rng: np.random.Generator) -> None:
        raw = np.array(self.window)
        self.mu = raw.mean(axis=0)
        self.sd = raw.std(axis=0)
        self.sd[self.sd == 0] = 1.0
        z = (raw - self.mu) / self.sd
        if self.cfg.preset == "aggo+dt":
            assign = agglomerative(z, 2)
        else:
            assign, _ = kmeans(z, 2, rng, self.cfg.kmeans_max_iter)
        try:
            labels = bootstrap_labels(assign, raw)
        except DegenerateClusters:
            return
        if self.cfg.preset == "aggo+dt":
            self.model = train_tree(z, labels, self.cfg.max_depth, self.cfg.min_samples_leaf)
        else:
            self.model = train_logistic(z, labels, self.cfg.epochs, self.cfg.lr)
        self.episodes_since_fit = 0
        self.fits += 1

    def label(self, feats: np.ndarray) -> DemandLabel:
        if not self.enabled:
            return DemandLabel.NHD
        if self.model is None:
            return DemandLabel.HD
        return classify(self.model, (feats - self.mu) / self.sd)


def agreement(pred: Sequence[int], truth: Sequence[int]) -> float:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    return float((pred == truth).mean()) if len(pred) else 1.0
