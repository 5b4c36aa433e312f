"""Native classical learners over the 9-dimensional feature space.

Four kinds: logistic regression and a linear SVM fit by (sub)gradient
descent, a random forest of gini trees on bootstrap samples with feature
subsampling, and gradient-boosted regression trees on logistic gradients.
All are deterministic under a seed and serialize bit-exactly through the
shared model dump format.

Split tie-breaking is fixed for determinism: candidate features are scanned
in ascending index order and thresholds in ascending value order, and a new
split must be strictly better to displace the incumbent, so equal-gain ties
resolve to the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from .analysis import FEATURE_DIM
from .errors import DegenerateDataError, DimensionError
from .modelio import dump_model, load_model

__all__ = [
    "ModelKind",
    "TrainedModel",
    "TreeNode",
    "cross_validate",
    "default_hyperparameters",
    "logistic_gradient",
    "logistic_loss",
    "predict_proba",
    "train",
]


class ModelKind(Enum):
    LOGISTIC_REGRESSION = "logistic_regression"
    LINEAR_SVM = "linear_svm"
    RANDOM_FOREST = "random_forest"
    GRADIENT_BOOSTED_TREES = "gradient_boosted_trees"


DEFAULT_HYPERPARAMETERS = {
    ModelKind.LOGISTIC_REGRESSION: {"learning_rate": 0.1, "l2": 1e-4, "epochs": 300},
    ModelKind.LINEAR_SVM: {"learning_rate": 0.1, "l2": 1e-4, "epochs": 300},
    ModelKind.RANDOM_FOREST: {"n_trees": 100, "max_depth": 6},
    ModelKind.GRADIENT_BOOSTED_TREES: {"n_rounds": 100, "max_depth": 3, "shrinkage": 0.1},
}


def default_hyperparameters(kind: ModelKind) -> dict:
    return dict(DEFAULT_HYPERPARAMETERS[kind])


@dataclass(frozen=True)
class TreeNode:
    """Binary tree node; a leaf when feature is None. Goes left on x[f] <= t."""

    feature: Optional[int] = None
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    value: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.feature is None

    def predict(self, x: np.ndarray) -> float:
        node = self
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node.value

    def to_dict(self) -> dict:
        if self.is_leaf:
            return {"value": self.value}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeNode":
        if "feature" not in d:
            return cls(value=float(d["value"]))
        return cls(
            feature=int(d["feature"]),
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"]),
            right=cls.from_dict(d["right"]),
        )


@dataclass
class TrainedModel:
    """A fitted learner: linear weights or a tree ensemble, plus its seed."""

    kind: ModelKind
    feature_dim: int = FEATURE_DIM
    seed: int = 0
    weights: Optional[np.ndarray] = None
    bias: float = 0.0
    trees: list[TreeNode] = field(default_factory=list)
    base_score: float = 0.0
    shrinkage: float = 1.0

    def to_payload(self) -> dict:
        payload: dict = {}
        if self.kind in (ModelKind.LOGISTIC_REGRESSION, ModelKind.LINEAR_SVM):
            payload["weights"] = np.asarray(self.weights, dtype=np.float64).tolist()
            payload["bias"] = self.bias
        else:
            payload["trees"] = [t.to_dict() for t in self.trees]
            if self.kind is ModelKind.GRADIENT_BOOSTED_TREES:
                payload["base_score"] = self.base_score
                payload["shrinkage"] = self.shrinkage
        return payload

    def save(self, path: str | Path) -> None:
        dump_model(path, self.kind.value, self.to_payload(), seed=self.seed,
                   feature_dim=self.feature_dim)

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        document = load_model(path)
        kind = ModelKind(document["kind"])
        payload = document["payload"]
        model = cls(kind=kind, feature_dim=document["feature_dim"], seed=document["seed"])
        if kind in (ModelKind.LOGISTIC_REGRESSION, ModelKind.LINEAR_SVM):
            model.weights = np.asarray(payload["weights"], dtype=np.float64)
            model.bias = float(payload["bias"])
        else:
            model.trees = [TreeNode.from_dict(t) for t in payload["trees"]]
            if kind is ModelKind.GRADIENT_BOOSTED_TREES:
                model.base_score = float(payload["base_score"])
                model.shrinkage = float(payload["shrinkage"])
        return model


# ---------------------------------------------------------------------------
# Data validation.
# ---------------------------------------------------------------------------


def _validate_training_data(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != FEATURE_DIM:
        raise DimensionError(f"feature matrix must be (n, {FEATURE_DIM}), got {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise DimensionError(f"{X.shape[0]} rows but {y.shape[0]} labels")
    if X.shape[0] < 2:
        raise DegenerateDataError("need at least 2 training rows")
    if len(np.unique(y)) < 2:
        raise DegenerateDataError("training labels contain a single class")
    return X, y


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# ---------------------------------------------------------------------------
# Linear models.
# ---------------------------------------------------------------------------


def logistic_loss(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean logistic loss plus (l2/2)||w||^2; y in {0, 1}."""
    z = X @ w + b
    margins = np.where(y == 1.0, z, -z)
    return float(np.mean(np.logaddexp(0.0, -margins)) + 0.5 * l2 * np.dot(w, w))


def logistic_gradient(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray,
                      l2: float) -> tuple[np.ndarray, float]:
    """Analytic gradient of logistic_loss with respect to (w, b)."""
    p = _sigmoid(X @ w + b)
    grad_w = X.T @ (p - y) / len(y) + l2 * w
    grad_b = float(np.mean(p - y))
    return grad_w, grad_b


def _train_logistic(X, y, hp, seed) -> TrainedModel:
    lr = hp.get("learning_rate", 0.1)
    l2 = hp.get("l2", 1e-4)
    epochs = hp.get("epochs", 300)
    w = np.zeros(X.shape[1], dtype=np.float64)
    b = 0.0
    current = logistic_loss(w, b, X, y, l2)
    for _ in range(epochs):
        grad_w, grad_b = logistic_gradient(w, b, X, y, l2)
        step = lr
        for _ in range(40):
            cand = logistic_loss(w - step * grad_w, b - step * grad_b, X, y, l2)
            if cand <= current:
                break
            step *= 0.5
        else:
            step = 0.0
            cand = current
        w = w - step * grad_w
        b = b - step * grad_b
        current = cand
    return TrainedModel(ModelKind.LOGISTIC_REGRESSION, X.shape[1], seed, weights=w, bias=b)


def _train_linear_svm(X, y, hp, seed) -> TrainedModel:
    lr = hp.get("learning_rate", 0.1)
    l2 = hp.get("l2", 1e-4)
    epochs = hp.get("epochs", 300)
    signs = np.where(y == 1.0, 1.0, -1.0)
    w = np.zeros(X.shape[1], dtype=np.float64)
    b = 0.0
    for t in range(epochs):
        margins = signs * (X @ w + b)
        active = margins < 1.0
        grad_w = l2 * w - (signs[active, None] * X[active]).sum(axis=0) / len(y)
        grad_b = -float(signs[active].sum()) / len(y)
        step = lr / np.sqrt(1.0 + t)
        w = w - step * grad_w
        b = b - step * grad_b
    return TrainedModel(ModelKind.LINEAR_SVM, X.shape[1], seed, weights=w, bias=b)


# ---------------------------------------------------------------------------
# Trees. Splits are found per feature with a vectorized prefix-sum scan.
# ---------------------------------------------------------------------------


def _best_split_classification(X, y, features) -> Optional[tuple[int, float, float]]:
    """Best (feature, threshold, gain) by gini impurity decrease, or None."""
    n = len(y)
    total_pos = float(y.sum())
    parent = 1.0 - (total_pos / n) ** 2 - ((n - total_pos) / n) ** 2
    best: Optional[tuple[int, float, float]] = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if len(cut) == 0:
            continue
        cum_pos = np.cumsum(y[order])[cut]
        n_left = (cut + 1).astype(np.float64)
        n_right = n - n_left
        pos_left = cum_pos
        pos_right = total_pos - pos_left
        gini_left = 1.0 - (pos_left / n_left) ** 2 - ((n_left - pos_left) / n_left) ** 2
        gini_right = 1.0 - (pos_right / n_right) ** 2 - ((n_right - pos_right) / n_right) ** 2
        gains = parent - (n_left * gini_left + n_right * gini_right) / n
        i = int(np.argmax(gains))  # first max = lowest threshold
        gain = float(gains[i])
        if gain > 1e-12 and (best is None or gain > best[2]):
            threshold = float((v[cut[i]] + v[cut[i] + 1]) / 2.0)
            best = (int(f), threshold, gain)
    return best


def _best_split_regression(X, r, features) -> Optional[tuple[int, float, float]]:
    """Best (feature, threshold, sse_reduction) for squared-error targets."""
    n = len(r)
    total = float(r.sum())
    parent_sse = float(np.dot(r, r) - total * total / n)
    best: Optional[tuple[int, float, float]] = None
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        cut = np.nonzero(v[:-1] < v[1:])[0]
        if len(cut) == 0:
            continue
        rs = r[order]
        cum_sum = np.cumsum(rs)[cut]
        cum_sq = np.cumsum(rs * rs)[cut]
        n_left = (cut + 1).astype(np.float64)
        n_right = n - n_left
        sse_left = cum_sq - cum_sum**2 / n_left
        sse_right = (np.dot(r, r) - cum_sq) - (total - cum_sum) ** 2 / n_right
        gains = parent_sse - (sse_left + sse_right)
        i = int(np.argmax(gains))
        gain = float(gains[i])
        if gain > 1e-12 and (best is None or gain > best[2]):
            threshold = float((v[cut[i]] + v[cut[i] + 1]) / 2.0)
            best = (int(f), threshold, gain)
    return best


def _grow_classification_tree(X, y, rng, max_depth, max_features, depth=0) -> TreeNode:
    n_pos = float(y.sum())
    n_neg = len(y) - n_pos
    # ties in the leaf majority resolve to the negative class
    leaf = TreeNode(value=1.0 if n_pos > n_neg else 0.0)
    if depth >= max_depth or n_pos == 0 or n_neg == 0 or len(y) < 2:
        return leaf
    features = np.sort(rng.choice(X.shape[1], size=max_features, replace=False))
    split = _best_split_classification(X, y, features)
    if split is None:
        return leaf
    f, t, _ = split
    mask = X[:, f] <= t
    return TreeNode(
        feature=f,
        threshold=t,
        left=_grow_classification_tree(X[mask], y[mask], rng, max_depth, max_features, depth + 1),
        right=_grow_classification_tree(X[~mask], y[~mask], rng, max_depth, max_features, depth + 1),
    )


def _grow_regression_tree(X, r, p, max_depth, depth=0) -> TreeNode:
    """Regression tree on logistic residuals; leaves hold Newton-step values."""
    denom = float((p * (1.0 - p)).sum())
    leaf = TreeNode(value=float(r.sum()) / max(denom, 1e-12))
    if depth >= max_depth or len(r) < 2:
        return leaf
    split = _best_split_regression(X, r, range(X.shape[1]))
    if split is None:
        return leaf
    f, t, _ = split
    mask = X[:, f] <= t
    return TreeNode(
        feature=f,
        threshold=t,
        left=_grow_regression_tree(X[mask], r[mask], p[mask], max_depth, depth + 1),
        right=_grow_regression_tree(X[~mask], r[~mask], p[~mask], max_depth, depth + 1),
    )


def _train_random_forest(X, y, hp, seed) -> TrainedModel:
    n_trees = hp.get("n_trees", 100)
    max_depth = hp.get("max_depth", 6)
    max_features = hp.get("max_features", max(1, int(np.sqrt(X.shape[1]))))
    rng = np.random.default_rng(seed)
    trees = []
    n = X.shape[0]
    for _ in range(n_trees):
        idx = rng.integers(0, n, size=n)
        trees.append(_grow_classification_tree(X[idx], y[idx], rng, max_depth, max_features))
    return TrainedModel(ModelKind.RANDOM_FOREST, X.shape[1], seed, trees=trees)


def _train_gbt(X, y, hp, seed) -> TrainedModel:
    n_rounds = hp.get("n_rounds", 100)
    max_depth = hp.get("max_depth", 3)
    shrinkage = hp.get("shrinkage", 0.1)
    p_bar = float(y.mean())
    base = float(np.log(p_bar / (1.0 - p_bar)))
    scores = np.full(len(y), base, dtype=np.float64)
    trees = []
    for _ in range(n_rounds):
        p = _sigmoid(scores)
        residual = y - p
        tree = _grow_regression_tree(X, residual, p, max_depth)
        trees.append(tree)
        scores += shrinkage * np.array([tree.predict(x) for x in X])
    return TrainedModel(ModelKind.GRADIENT_BOOSTED_TREES, X.shape[1], seed,
                        trees=trees, base_score=base, shrinkage=shrinkage)


_TRAINERS = {
    ModelKind.LOGISTIC_REGRESSION: _train_logistic,
    ModelKind.LINEAR_SVM: _train_linear_svm,
    ModelKind.RANDOM_FOREST: _train_random_forest,
    ModelKind.GRADIENT_BOOSTED_TREES: _train_gbt,
}


def train(kind: ModelKind, X: np.ndarray, y: np.ndarray, hp: Optional[dict] = None,
          seed: int = 0) -> TrainedModel:
    """Fit one learner; deterministic for a fixed (data, hp, seed) triple."""
    X, y = _validate_training_data(X, y)
    merged = default_hyperparameters(kind)
    merged.update(hp or {})
    return _TRAINERS[kind](X, y, merged, seed)


def predict_proba(model: TrainedModel, x: np.ndarray) -> float:
    """P(positive | x) for a single feature vector.

    Logistic regression: sigmoid of the linear score. Linear SVM: sigmoid of
    the margin, a documented probability surrogate. Random forest: fraction
    of trees voting positive. Boosted trees: sigmoid of the base score plus
    the shrinkage-scaled sum of leaf values.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.feature_dim,):
        raise DimensionError(f"expected vector of dim {model.feature_dim}, got {x.shape}")
    if model.kind in (ModelKind.LOGISTIC_REGRESSION, ModelKind.LINEAR_SVM):
        return float(_sigmoid(float(np.dot(model.weights, x)) + model.bias))
    if model.kind is ModelKind.RANDOM_FOREST:
        votes = sum(tree.predict(x) for tree in model.trees)
        return float(votes / len(model.trees))
    total = model.base_score + model.shrinkage * sum(tree.predict(x) for tree in model.trees)
    return float(_sigmoid(total))


def predict_proba_batch(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    return np.array([predict_proba(model, row) for row in X])


# ---------------------------------------------------------------------------
# Cross-validation.
# ---------------------------------------------------------------------------


def _f1(preds: np.ndarray, gold: np.ndarray) -> float:
    tp = float(np.sum((preds == 1) & (gold == 1)))
    fp = float(np.sum((preds == 1) & (gold == 0)))
    fn = float(np.sum((preds == 0) & (gold == 1)))
    if tp == 0.0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2.0 * precision * recall / (precision + recall)


def stratified_folds(y: np.ndarray, folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic stratified fold assignment; returns index arrays."""
    rng = np.random.default_rng(seed)
    assignment = np.zeros(len(y), dtype=np.intp)
    for cls in np.unique(y):
        idx = np.nonzero(y == cls)[0]
        rng.shuffle(idx)
        for i, j in enumerate(idx):
            assignment[j] = i % folds
    return [np.nonzero(assignment == k)[0] for k in range(folds)]


def cross_validate(kind: ModelKind, X: np.ndarray, y: np.ndarray, folds: int = 5,
                   grid: Optional[list[dict]] = None, seed: int = 0) -> tuple[dict, float]:
    """Pick the grid point maximizing mean validation F1 over stratified folds.

    Ties break in favor of the earliest grid entry. Returns (best_hp, mean_f1).
    """
    X, y = _validate_training_data(X, y)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if len(y) < folds:
        raise ValueError(f"cannot make {folds} folds from {len(y)} rows")
    grid = grid or [default_hyperparameters(kind)]
    fold_indices = stratified_folds(y, folds, seed)
    best_hp, best_f1 = None, -1.0
    for hp in grid:
        scores = []
        for k, val_idx in enumerate(fold_indices):
            train_idx = np.concatenate([fold_indices[j] for j in range(folds) if j != k])
            if len(np.unique(y[train_idx])) < 2 or len(val_idx) == 0:
                continue
            model = train(kind, X[train_idx], y[train_idx], hp, seed=seed)
            preds = (predict_proba_batch(model, X[val_idx]) >= 0.5).astype(np.intp)
            scores.append(_f1(preds, y[val_idx].astype(np.intp)))
        mean_f1 = float(np.mean(scores)) if scores else 0.0
        if mean_f1 > best_f1:
            best_hp, best_f1 = hp, mean_f1
    return dict(best_hp), best_f1
