"""Anomaly detectors on top of a trained autoencoder.

Two mechanisms:

* ``ThresholdDetector``: flag a sample when its reconstruction error is strictly
  above the 95th percentile of the normal training errors.
* ``IsolationForest``: random isolation trees fitted on latent codes of the
  normal training data; the continuous score is used for ranking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

EULER_GAMMA = 0.5772156649015329


class NotFittedError(RuntimeError):
    pass


@dataclass
class ThresholdDetector:
    percentile: float = 95.0
    tau: float | None = None

    def fit(self, train_errors: np.ndarray) -> ThresholdDetector:
        errors = np.asarray(train_errors, dtype=float).ravel()
        if errors.size == 0:
            raise ValueError("cannot fit a threshold on an empty error array")
        if not np.all(np.isfinite(errors)):
            raise ValueError("training errors contain non-finite values")
        self.tau = float(np.percentile(errors, self.percentile, method="linear"))
        return self

    def classify(self, scores: np.ndarray) -> np.ndarray:
        if self.tau is None:
            raise NotFittedError("threshold detector has not been fitted")
        return np.asarray(scores) > self.tau

    def to_dict(self) -> dict:
        return {"percentile": self.percentile, "tau": self.tau}


def fit_threshold(train_errors: np.ndarray, percentile: float = 95.0) -> ThresholdDetector:
    return ThresholdDetector(percentile).fit(train_errors)


def score_and_classify(detector: ThresholdDetector, model, x: np.ndarray, noise=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample reconstruction errors and ``score > tau`` labels (True = anomaly)."""
    if detector.tau is None:
        raise NotFittedError("threshold detector has not been fitted")
    scores = model.reconstruction_errors(x, noise=noise)
    return scores, detector.classify(scores)


# ---------------------------------------------------------------------------
# isolation forest


def average_path_length(n: np.ndarray | int) -> np.ndarray | float:
    """``c(n) = 2 H(n-1) - 2 (n-1) / n`` with ``H(i) = ln(i) + gamma``; ``c(n) = 0`` for ``n <= 1``."""
    arr = np.asarray(n, dtype=float)
    out = np.zeros_like(arr)
    big = arr > 1
    m = arr[big]
    out[big] = 2.0 * (np.log(m - 1.0) + EULER_GAMMA) - 2.0 * (m - 1.0) / m
    return float(out) if np.ndim(n) == 0 else out


@dataclass
class IsolationTree:
    """Flat array representation; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    size: np.ndarray
    depth: np.ndarray

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def path_lengths(self, x: np.ndarray) -> np.ndarray:
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        for _ in range(self.max_depth + 1):
            feat = self.feature[node]
            internal = feat >= 0
            if not internal.any():
                break
            go_left = x[rows, np.where(internal, feat, 0)] < self.threshold[node]
            nxt = np.where(go_left, self.left[node], self.right[node])
            node = np.where(internal, nxt, node)
        return self.depth[node] + average_path_length(self.size[node])


def _grow(x: np.ndarray, max_depth: int, rng: np.random.Generator) -> IsolationTree:
    feature, threshold, left, right, size, depth = [], [], [], [], [], []

    def new_node(n: int, d: int) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        size.append(n)
        depth.append(d)
        return len(feature) - 1

    stack = [(new_node(len(x), 0), np.arange(len(x)))]
    while stack:
        node, idx = stack.pop()
        d = depth[node]
        if len(idx) <= 1 or d >= max_depth:
            continue
        sub = x[idx]
        lo, hi = sub.min(axis=0), sub.max(axis=0)
        splittable = np.flatnonzero(hi > lo)
        if splittable.size == 0:
            continue
        f = int(rng.choice(splittable))
        t = float(rng.uniform(lo[f], hi[f]))
        if t <= lo[f]:
            t = float(np.nextafter(lo[f], hi[f]))
        mask = sub[:, f] < t
        feature[node], threshold[node] = f, t
        l_id = new_node(int(mask.sum()), d + 1)
        r_id = new_node(int((~mask).sum()), d + 1)
        left[node], right[node] = l_id, r_id
        stack.append((r_id, idx[~mask]))
        stack.append((l_id, idx[mask]))

    return IsolationTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(size, dtype=np.int64),
        np.array(depth, dtype=np.int64),
    )


@dataclass
class IsolationForest:
    n_trees: int = 100
    psi: int = 256
    seed: int = 0
    trees: list[IsolationTree] = field(default_factory=list)

    @property
    def max_depth(self) -> int:
        return math.ceil(math.log2(self.psi))

    def fit(self, latents: np.ndarray) -> IsolationForest:
        x = np.atleast_2d(np.asarray(latents, dtype=float))
        if self.psi < 2:
            raise ValueError(f"subsample size must be >= 2, got {self.psi}")
        if x.shape[0] < 2:
            raise ValueError(f"need at least 2 rows, got {x.shape[0]}")
        if self.psi > x.shape[0]:
            raise ValueError(f"subsample size {self.psi} exceeds the {x.shape[0]} available rows")
        seeds = np.random.SeedSequence(self.seed).spawn(self.n_trees)
        self.trees = []
        for s in seeds:
            rng = np.random.default_rng(s)
            sample = x[rng.choice(x.shape[0], size=self.psi, replace=False)]
            self.trees.append(_grow(sample, self.max_depth, rng))
        return self

    def expected_path_length(self, z: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise NotFittedError("isolation forest has not been fitted")
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.mean([t.path_lengths(z) for t in self.trees], axis=0)

    def score(self, z: np.ndarray) -> np.ndarray:
        """Anomaly score ``2 ** (-E[h] / c(psi))``; higher is more anomalous."""
        return 2.0 ** (-self.expected_path_length(z) / average_path_length(self.psi))

    def predict(self, z: np.ndarray, threshold: float = 0.5) -> np.ndarray:
        return self.score(z) > threshold

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {"iforest_meta": np.array([self.n_trees, self.psi, self.seed], dtype=np.int64)}
        for i, t in enumerate(self.trees):
            for name in ("feature", "threshold", "left", "right", "size", "depth"):
                out[f"iforest_{i}_{name}"] = getattr(t, name)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> IsolationForest:
        n_trees, psi, seed = (int(v) for v in arrays["iforest_meta"])
        trees = [
            IsolationTree(
                *(arrays[f"iforest_{i}_{name}"] for name in ("feature", "threshold", "left", "right", "size", "depth"))
            )
            for i in range(n_trees)
        ]
        return cls(n_trees, psi, seed, trees)


def iforest_fit(latents: np.ndarray, n_trees: int = 100, psi: int = 256, seed: int = 0) -> IsolationForest:
    return IsolationForest(n_trees, psi, seed).fit(latents)


def iforest_score(forest: IsolationForest, z: np.ndarray) -> np.ndarray:
    return forest.score(z)
