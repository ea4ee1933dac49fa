"""
gbt.py
Squared-error gradient boosting with ridge-penalised leaves.

Each tree fits the current residuals r. A leaf holding residuals r_i gets
weight sum(r_i) / (count + lam); a split is scored by
    S_L^2 / (n_L + lam) + S_R^2 / (n_R + lam) - S^2 / (n + lam)
Predictions add eta * leaf weight per tree to the base value (the target mean).

Split search works on per-feature bins: a feature with at most `max_bins`
distinct values gets one bin per value (exact greedy), otherwise quantile bins.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from histoage.utils.errors import DataError

logger = logging.getLogger(__name__)

MIN_GAIN = 1e-12


class FeatureBinner:
    def __init__(self, max_bins: int = 256):
        self.max_bins = max_bins
        self.edges = []

    def fit(self, X: np.ndarray) -> "FeatureBinner":
        self.edges = []
        for column in X.T:
            values = np.unique(column)
            if len(values) <= self.max_bins:
                edges = (values[:-1] + values[1:]) / 2.0
            else:
                qs = np.quantile(column, np.linspace(0.0, 1.0, self.max_bins + 1)[1:-1])
                edges = np.unique(qs)
            self.edges.append(edges)
        return self

    def transform(self, X: np.ndarray) -> np.ndarray:
        """Bin code = number of edges <= x, so code <= b exactly when x < edges[b]."""
        codes = np.empty(X.shape, dtype=np.int32)
        for f, edges in enumerate(self.edges):
            codes[:, f] = np.searchsorted(edges, X[:, f], side="right")
        return codes

    @property
    def n_bins(self) -> int:
        return max((len(e) for e in self.edges), default=0) + 1


class RegressionTree:
    """Depth-limited tree stored as flat arrays; feature == -1 marks a leaf."""

    def __init__(self, max_depth: int = 4, lam: float = 1.0, min_child: int = 1):
        self.max_depth = max_depth
        self.lam = lam
        self.min_child = min_child
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.value = []

    def _new_node(self) -> int:
        for arr, default in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1), (self.value, 0.0)):
            arr.append(default)
        return len(self.feature) - 1

    def _leaf_weight(self, total: float, count: int) -> float:
        denom = count + self.lam
        return total / denom if denom > 0 else 0.0

    def fit(self, codes: np.ndarray, residuals: np.ndarray, binner: FeatureBinner, columns=None) -> "RegressionTree":
        columns = np.arange(codes.shape[1]) if columns is None else np.asarray(columns)
        n_edges = np.array([len(binner.edges[c]) for c in columns])
        n_bins = binner.n_bins
        stack = [(self._new_node(), np.arange(len(residuals)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            r = residuals[idx]
            total, count = float(r.sum()), len(idx)
            self.value[node] = self._leaf_weight(total, count)
            if depth >= self.max_depth or count < 2 * self.min_child or n_bins < 2:
                continue
            split = self._best_split(codes[np.ix_(idx, columns)], r, total, n_edges, n_bins)
            if split is None:
                continue
            j, b = split
            feature = int(columns[j])
            go_left = codes[idx, feature] <= b
            self.feature[node] = feature
            self.threshold[node] = float(binner.edges[feature][b])
            left, right = self._new_node(), self._new_node()
            self.left[node], self.right[node] = left, right
            stack.append((right, idx[~go_left], depth + 1))
            stack.append((left, idx[go_left], depth + 1))
        self._freeze()
        return self

    def _best_split(self, codes: np.ndarray, r: np.ndarray, total: float, n_edges: np.ndarray, n_bins: int):
        n, m = codes.shape
        flat = (codes + (np.arange(m) * n_bins)[None, :]).ravel()
        sums = np.bincount(flat, weights=np.repeat(r, m), minlength=m * n_bins).reshape(m, n_bins)
        counts = np.bincount(flat, minlength=m * n_bins).reshape(m, n_bins)
        left_sum = np.cumsum(sums, axis=1)[:, :-1]
        left_count = np.cumsum(counts, axis=1)[:, :-1]
        right_sum = total - left_sum
        right_count = n - left_count

        valid = (left_count >= self.min_child) & (right_count >= self.min_child)
        valid &= np.arange(n_bins - 1)[None, :] < n_edges[:, None]
        lam = self.lam
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = (
                left_sum ** 2 / np.where(valid, left_count + lam, 1.0)
                + right_sum ** 2 / np.where(valid, right_count + lam, 1.0)
                - total ** 2 / (n + lam if n + lam > 0 else 1.0)
            )
        gain = np.where(valid, gain, -np.inf)
        best = int(np.argmax(gain))
        j, b = divmod(best, n_bins - 1)
        if not np.isfinite(gain[j, b]) or gain[j, b] <= MIN_GAIN:
            return None
        return j, b

    def _freeze(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold, dtype=np.float64)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value, dtype=np.float64)

    def predict(self, X: np.ndarray) -> np.ndarray:
        rows = np.arange(len(X))
        node = np.zeros(len(X), dtype=np.int64)
        for _ in range(self.max_depth):
            feature = self.feature[node]
            internal = feature >= 0
            if not internal.any():
                break
            go_left = X[rows, np.where(internal, feature, 0)] < self.threshold[node]
            node = np.where(internal, np.where(go_left, self.left[node], self.right[node]), node)
        return self.value[node]

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())


@dataclass
class GBTMember:
    base: float
    eta: float
    trees: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)  # training MSE after 0, 1, ..., T trees

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.full(len(X), self.base, dtype=np.float64)
        for tree in self.trees:
            out += self.eta * tree.predict(X)
        return out


def fit_gbt(features, targets, depth: int = 4, trees: int = 200, eta: float = 0.1, lam: float = 1.0,
            colsample: float = 1.0, min_child: int = 1, seed: int = 0, max_bins: int = 256) -> GBTMember:
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or len(X) != len(y):
        raise DataError(f"features {X.shape} and targets {y.shape} do not line up")
    if len(y) == 0:
        raise DataError("cannot fit a boosted model on zero rows")
    if not (0 < eta <= 1):
        raise DataError(f"learning rate must be in (0, 1], got {eta}")
    if lam < 0:
        raise DataError(f"leaf penalty must be non-negative, got {lam}")
    if len(y) < 10:
        logger.warning(f"Fitting boosted trees on only {len(y)} rows")

    binner = FeatureBinner(max_bins).fit(X)
    codes = binner.transform(X)
    rng = np.random.default_rng(seed)
    n_cols = X.shape[1]
    take = max(1, int(round(colsample * n_cols)))

    member = GBTMember(base=float(y.mean()), eta=eta)
    prediction = np.full(len(y), member.base)
    member.train_loss.append(float(np.mean((y - prediction) ** 2)))
    for _ in range(trees):
        residuals = y - prediction
        columns = np.sort(rng.choice(n_cols, size=take, replace=False)) if take < n_cols else None
        tree = RegressionTree(depth, lam, min_child).fit(codes, residuals, binner, columns)
        member.trees.append(tree)
        prediction = prediction + eta * tree.predict(X)
        member.train_loss.append(float(np.mean((y - prediction) ** 2)))
    return member
