# classical.py
"""Feature-space classifiers: LR, RF, linear SVM, KNN and gradient boosting.

Every classifier exposes ``fit(X, y)``, ``decision_scores(X)`` and
``predict(X)``; ``predict`` is ``decision_scores(X) >= threshold``.
"""
import logging
import warnings
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from utils import DataError

logger = logging.getLogger(__name__)

DUMP_FORMAT_VERSION = 1


class EmptyTrainSet(DataError):
    pass


class UnsupportedKind(DataError):
    pass


class DegenerateSingleClass(UserWarning):
    pass


class ClassifierKind(str, Enum):
    LR = "LR"
    RF = "RF"
    SVM = "SVM"
    KNN = "KNN"
    GB = "GB"


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    labels: np.ndarray
    column_names: list[str]
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim == 1:
            self.rows = self.rows.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.rows) != len(self.labels):
            raise DataError(f"{len(self.rows)} rows but {len(self.labels)} labels")
        if self.rows.shape[1] != len(self.column_names):
            raise DataError(f"{self.rows.shape[1]} columns but {len(self.column_names)} names")
        if not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, label_column: str = "label") -> "FeatureMatrix":
        columns = [c for c in frame.columns if c != label_column]
        return cls(frame[columns].to_numpy(dtype=np.float64), frame[label_column].to_numpy(), columns)

    def take(self, idx) -> "FeatureMatrix":
        return replace(self, rows=self.rows[idx], labels=self.labels[idx])


def standardize(train: FeatureMatrix, test: FeatureMatrix) -> tuple[FeatureMatrix, FeatureMatrix]:
    """Scale both matrices with the train split's column mean and std (constant columns become 0)."""
    if list(train.column_names) != list(test.column_names):
        raise DataError("train and test feature columns differ")
    mean = train.rows.mean(axis=0) if len(train) else np.zeros(train.rows.shape[1])
    std = train.rows.std(axis=0) if len(train) else np.ones(train.rows.shape[1])
    std = np.where(std > 0, std, 1.0)
    scaled = [replace(m, rows=(m.rows - mean) / std, mean=mean, std=std) for m in (train, test)]
    for m in scaled:
        if not np.all(np.isfinite(m.rows)):
            raise DataError("non-finite feature values after standardization")
    return scaled[0], scaled[1]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_fit(X: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if len(y) == 0:
        raise EmptyTrainSet("cannot fit on an empty training set")
    return X.reshape(len(y), -1), y


# ---------------------------------------------------------------------------
# trees

class DecisionTree:
    """CART with Gini impurity on 0/1 labels or squared error on real targets."""

    def __init__(self, max_depth: int = 12, min_samples_split: int = 2, max_features: Optional[int] = None,
                 criterion: str = "gini", rng: Optional[np.random.Generator] = None):
        if criterion not in ("gini", "mse"):
            raise DataError(f"unknown split criterion {criterion!r}")
        self.max_depth = max_depth
        self.min_samples_split = min_samples_split
        self.max_features = max_features
        self.criterion = criterion
        self.rng = rng or np.random.default_rng(0)

    def _impurity(self, y: np.ndarray) -> float:
        if self.criterion == "gini":
            p = y.mean()
            return float(2 * p * (1 - p))
        return float(y.var())

    def _best_split(self, X: np.ndarray, y: np.ndarray):
        n, d = X.shape
        features = np.arange(d)
        if self.max_features is not None and self.max_features < d:
            features = np.sort(self.rng.choice(d, size=self.max_features, replace=False))
        best = (np.inf, None, None)
        n_left = np.arange(1, n)
        n_right = n - n_left
        for f in features:
            order = np.argsort(X[:, f], kind="stable")
            xs, ys = X[order, f], y[order]
            valid = xs[:-1] < xs[1:]
            if not valid.any():
                continue
            cs = np.cumsum(ys)[:-1]
            total = ys.sum()
            if self.criterion == "gini":
                p_l, p_r = cs / n_left, (total - cs) / n_right
                cost = (n_left * 2 * p_l * (1 - p_l) + n_right * 2 * p_r * (1 - p_r)) / n
            else:
                sq = np.cumsum(ys * ys)[:-1]
                sse_l = sq - cs * cs / n_left
                sse_r = (np.sum(ys * ys) - sq) - (total - cs) ** 2 / n_right
                cost = (sse_l + sse_r) / n
            cost = np.where(valid, cost, np.inf)
            i = int(np.argmin(cost))
            if cost[i] < best[0]:
                best = (float(cost[i]), int(f), float((xs[i] + xs[i + 1]) / 2))
        return best

    def fit(self, X, y) -> "DecisionTree":
        X, y = _check_fit(X, y)
        y = y.astype(np.float64)
        self.n_features = X.shape[1]
        self.importances = np.zeros(self.n_features)
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

        def new_node(value: float) -> int:
            for column, v in ((self.feature, -1), (self.threshold, 0.0), (self.left, -1), (self.right, -1),
                              (self.value, value)):
                column.append(v)
            return len(self.value) - 1

        stack = [(new_node(float(y.mean())), np.arange(len(y)), 0)]
        while stack:
            node, idx, depth = stack.pop()
            ys = y[idx]
            impurity = self._impurity(ys)
            if depth >= self.max_depth or len(idx) < self.min_samples_split or impurity <= 1e-15:
                continue
            cost, f, thr = self._best_split(X[idx], ys)
            if f is None:
                continue
            go_left = X[idx, f] <= thr
            left_idx, right_idx = idx[go_left], idx[~go_left]
            if len(left_idx) == 0 or len(right_idx) == 0:
                continue
            self.importances[f] += len(idx) / len(y) * (impurity - cost)
            self.feature[node], self.threshold[node] = f, thr
            self.left[node] = new_node(float(y[left_idx].mean()))
            self.right[node] = new_node(float(y[right_idx].mean()))
            stack.append((self.right[node], right_idx, depth + 1))
            stack.append((self.left[node], left_idx, depth + 1))

        self.feature = np.array(self.feature)
        self.threshold = np.array(self.threshold)
        self.left = np.array(self.left)
        self.right = np.array(self.right)
        self.value = np.array(self.value)
        return self

    def apply(self, X) -> np.ndarray:
        """Leaf index reached by every row."""
        X = np.asarray(X, dtype=np.float64)
        nodes = np.zeros(len(X), dtype=int)
        active = self.feature[nodes] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            cur = nodes[rows]
            go_left = X[rows, self.feature[cur]] <= self.threshold[cur]
            nodes[rows] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[nodes] >= 0
        return nodes

    def predict_value(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    @property
    def n_nodes(self) -> int:
        return len(self.value)

    def dump(self) -> list[str]:
        lines = []
        for i in range(self.n_nodes):
            if self.feature[i] < 0:
                lines.append(f"  {i}: leaf {self.value[i]:.10g}")
            else:
                lines.append(f"  {i}: x[{self.feature[i]}] <= {self.threshold[i]:.10g} ? {self.left[i]} : {self.right[i]}")
        return lines


class Classifier:
    kind: ClassifierKind
    threshold = 0.5

    def fit(self, X, y) -> "Classifier":
        raise NotImplementedError

    def decision_scores(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict(self, X) -> np.ndarray:
        return (self.decision_scores(X) >= self.threshold).astype(int)


class RandomForest(Classifier):
    kind = ClassifierKind.RF

    def __init__(self, n_trees: int = 100, max_depth: int = 12, min_samples_split: int = 2, seed: int = 0):
        self.n_trees, self.max_depth, self.min_samples_split = n_trees, max_depth, min_samples_split
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_fit(X, y)
        n, d = X.shape
        max_features = max(1, int(np.sqrt(d)))
        rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(self.seed).spawn(self.n_trees)]
        self.trees = []
        for rng in rngs:
            boot = rng.integers(0, n, size=n)
            tree = DecisionTree(self.max_depth, self.min_samples_split, max_features, "gini", rng)
            self.trees.append(tree.fit(X[boot], y[boot]))
        logger.debug("[classical] RF fitted %d trees on %d rows", self.n_trees, n)
        return self

    def decision_scores(self, X):
        return np.mean([t.predict_value(X) for t in self.trees], axis=0)

    @property
    def importances(self) -> np.ndarray:
        return np.mean([t.importances for t in self.trees], axis=0)


class GradientBoosting(Classifier):
    """Stagewise logistic boosting with Newton-step leaf values."""
    kind = ClassifierKind.GB

    def __init__(self, n_estimators: int = 200, max_depth: int = 3, learning_rate: float = 0.1, seed: int = 0):
        self.n_estimators, self.max_depth, self.learning_rate = n_estimators, max_depth, learning_rate
        self.seed = seed

    def fit(self, X, y):
        X, y = _check_fit(X, y)
        y = y.astype(np.float64)
        p0 = np.clip(y.mean(), 1e-6, 1 - 1e-6)
        self.init = float(np.log(p0 / (1 - p0)))
        raw = np.full(len(y), self.init)
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_estimators):
            p = _sigmoid(raw)
            residual = y - p
            tree = DecisionTree(self.max_depth, 2, None, "mse", rng).fit(X, residual)
            leaves = tree.apply(X)
            hessian = p * (1 - p)
            for leaf in np.unique(leaves):
                member = leaves == leaf
                tree.value[leaf] = residual[member].sum() / (hessian[member].sum() + 1e-12)
            raw += self.learning_rate * tree.value[leaves]
            self.trees.append(tree)
        return self

    def raw_scores(self, X) -> np.ndarray:
        raw = np.full(len(X), self.init)
        for tree in self.trees:
            raw += self.learning_rate * tree.predict_value(X)
        return raw

    def decision_scores(self, X):
        return _sigmoid(self.raw_scores(np.asarray(X, dtype=np.float64)))

    @property
    def importances(self) -> np.ndarray:
        return np.mean([t.importances for t in self.trees], axis=0)


class LogisticRegression(Classifier):
    kind = ClassifierKind.LR

    def __init__(self, learning_rate: float = 0.1, epochs: int = 500, l2: float = 1e-3, seed: int = 0):
        self.learning_rate, self.epochs, self.l2, self.seed = learning_rate, epochs, l2, seed

    def fit(self, X, y):
        X, y = _check_fit(X, y)
        n, d = X.shape
        self.weights, self.bias = np.zeros(d), 0.0
        for _ in range(self.epochs):
            err = _sigmoid(X @ self.weights + self.bias) - y
            self.weights -= self.learning_rate * (X.T @ err / n + self.l2 * self.weights)
            self.bias -= self.learning_rate * err.mean()
        return self

    def decision_scores(self, X):
        return _sigmoid(np.asarray(X, dtype=np.float64) @ self.weights + self.bias)


class LinearSVM(Classifier):
    """Hinge loss with L2 penalty, full-batch subgradient descent; scores are signed margins."""
    kind = ClassifierKind.SVM
    threshold = 0.0

    def __init__(self, learning_rate: float = 0.1, epochs: int = 500, l2: float = 1e-3, seed: int = 0):
        self.learning_rate, self.epochs, self.l2, self.seed = learning_rate, epochs, l2, seed

    def fit(self, X, y):
        X, y = _check_fit(X, y)
        n, d = X.shape
        signed = 2.0 * y - 1.0
        self.weights, self.bias = np.zeros(d), 0.0
        for _ in range(self.epochs):
            active = signed * (X @ self.weights + self.bias) < 1
            self.weights -= self.learning_rate * (-(X[active].T @ signed[active]) / n + self.l2 * self.weights)
            self.bias -= self.learning_rate * (-signed[active].sum() / n)
        return self

    def decision_scores(self, X):
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


class KNearestNeighbors(Classifier):
    """Euclidean majority vote; the score is the positive share among the k nearest rows."""
    kind = ClassifierKind.KNN

    def __init__(self, k: int = 5, seed: int = 0, chunk: int = 512):
        if k < 1:
            raise DataError("k must be >= 1")
        self.k, self.seed, self.chunk = k, seed, chunk

    def fit(self, X, y):
        self.X, self.y = _check_fit(X, y)
        self.sq = np.einsum("ij,ij->i", self.X, self.X)
        return self

    def decision_scores(self, X):
        X = np.asarray(X, dtype=np.float64)
        k = min(self.k, len(self.y))
        scores = np.empty(len(X))
        for start in range(0, len(X), self.chunk):
            q = X[start:start + self.chunk]
            dist = np.einsum("ij,ij->i", q, q)[:, None] - 2 * q @ self.X.T + self.sq[None, :]
            nearest = np.argsort(np.maximum(dist, 0), axis=1, kind="stable")[:, :k]
            scores[start:start + len(q)] = self.y[nearest].mean(axis=1)
        return scores


class ConstantClassifier(Classifier):
    kind = None

    def __init__(self, label: int):
        self.label = int(label)

    def fit(self, X, y):
        return self

    def decision_scores(self, X):
        return np.full(len(X), float(self.label))


CLASSIFIERS = {
    ClassifierKind.LR: LogisticRegression,
    ClassifierKind.RF: RandomForest,
    ClassifierKind.SVM: LinearSVM,
    ClassifierKind.KNN: KNearestNeighbors,
    ClassifierKind.GB: GradientBoosting,
}


def make_classifier(kind, params: Optional[dict] = None, seed: int = 0) -> Classifier:
    kind = ClassifierKind(kind)
    try:
        return CLASSIFIERS[kind](seed=seed, **(params or {}))
    except TypeError as e:
        raise DataError(f"bad {kind.value} parameters {params}: {e}") from e


@dataclass
class Prediction:
    labels: np.ndarray
    scores: np.ndarray
    model: Classifier
    degenerate: bool = False
    train_labels: Optional[np.ndarray] = None


def fit_predict(kind, train: FeatureMatrix, test: FeatureMatrix, params: Optional[dict] = None,
                seed: int = 0) -> Prediction:
    """Standardize with train statistics, fit ``kind`` and predict the test rows."""
    kind = ClassifierKind(kind)
    if len(train) == 0:
        raise EmptyTrainSet("cannot fit on an empty training set")
    train, test = standardize(train, test)
    present = np.unique(train.labels)
    if len(present) == 1:
        message = f"{kind.value}: training labels are all {present[0]}; predicting a constant"
        logger.warning("[classical] %s", message)
        warnings.warn(message, DegenerateSingleClass, stacklevel=2)
        model = ConstantClassifier(present[0])
        scores = model.decision_scores(test.rows)
        return Prediction(model.predict(test.rows), scores, model, degenerate=True,
                          train_labels=model.predict(train.rows))

    model = make_classifier(kind, params, seed).fit(train.rows, train.labels)
    scores = model.decision_scores(test.rows)
    return Prediction(model.predict(test.rows), scores, model, train_labels=model.predict(train.rows))


def feature_importance(kind, model: Classifier, column_names: Sequence[str]) -> list[tuple[str, float]]:
    """Mean impurity-decrease ranking, ties broken by column index."""
    kind = ClassifierKind(kind)
    if kind not in (ClassifierKind.RF, ClassifierKind.GB):
        raise UnsupportedKind(f"{kind.value} has no impurity-based importances")
    importances = getattr(model, "importances", None)
    if importances is None:
        importances = np.zeros(len(column_names))
    total = importances.sum()
    if total > 0:
        importances = importances / total
    order = sorted(range(len(importances)), key=lambda i: (-importances[i], i))
    return [(column_names[i], float(importances[i])) for i in order]


def dump_model(model: Classifier, column_names: Optional[Sequence[str]] = None) -> str:
    kind = model.kind.value if model.kind else "constant"
    lines = [f"# classical model dump v{DUMP_FORMAT_VERSION}", f"kind: {kind}"]
    if column_names is not None:
        lines.append("columns: " + ",".join(column_names))
    if isinstance(model, ConstantClassifier):
        lines.append(f"label: {model.label}")
    elif isinstance(model, (LogisticRegression, LinearSVM)):
        lines.append("weights: " + " ".join(f"{w:.10g}" for w in model.weights))
        lines.append(f"bias: {model.bias:.10g}")
    elif isinstance(model, KNearestNeighbors):
        lines.append(f"k: {model.k}")
        lines.append(f"train_rows: {len(model.y)}")
    else:
        if isinstance(model, GradientBoosting):
            lines.append(f"init: {model.init:.10g}")
            lines.append(f"learning_rate: {model.learning_rate:.10g}")
        for i, tree in enumerate(model.trees):
            lines.append(f"tree {i} nodes={tree.n_nodes}")
            lines.extend(tree.dump())
    return "\n".join(lines) + "\n"
