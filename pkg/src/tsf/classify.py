"""Material classification from recovered ``(k, eps_prime)`` maps.

Features are a ``w x w`` window of ``k`` followed by the same window of
``eps_prime`` (row-major), so ``w = 1, 3, 5`` give 2, 18 and 50 features.
Both classifiers z-score the features with statistics of their own training
split, since ``k`` and ``eps_prime`` live on very different scales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, TrainingError
from .inverse import detect_metal

__all__ = [
    "METAL_LABEL",
    "FeatureVector",
    "MaterialDataset",
    "ConfusionMatrix",
    "CentroidModel",
    "MLPModel",
    "extract_features",
    "train_centroid",
    "train_mlp",
    "predict",
    "classify_sample",
    "loo_cv",
    "confusion_from_predictions",
    "accuracy_table",
]

METAL_LABEL = "metal/conductor"


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: np.ndarray
    label: str | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        w = int(round(np.sqrt(v.size / 2)))
        if v.size != 2 * w * w or w % 2 == 0:
            raise InvalidArgumentError("feature length must be 2*w^2 for an odd window w")
        object.__setattr__(self, "values", v)

    @property
    def window(self):
        return int(round(np.sqrt(self.values.size / 2)))


@dataclass(frozen=True, eq=False)
class MaterialDataset:
    samples: list
    label_names: list

    def __post_init__(self):
        if not self.samples:
            raise InvalidArgumentError("dataset is empty")
        n = self.samples[0].values.size
        if any(s.values.size != n for s in self.samples):
            raise InvalidArgumentError("all feature vectors must have the same length")
        for s in self.samples:
            if s.label not in self.label_names:
                raise InvalidArgumentError(f"sample label {s.label!r} not in label_names")

    @classmethod
    def from_samples(cls, samples):
        """Dataset whose label order is the sorted set of sample labels."""
        return cls(list(samples), sorted({s.label for s in samples}))

    @property
    def X(self):
        return np.stack([s.values for s in self.samples])

    @property
    def y(self):
        index = {name: i for i, name in enumerate(self.label_names)}
        return np.array([index[s.label] for s in self.samples])

    def subset(self, idx, present_only=False):
        """Samples at ``idx``; with ``present_only`` the label list shrinks to
        the labels that still occur (keeping their order)."""
        samples = [self.samples[i] for i in idx]
        names = self.label_names
        if present_only:
            seen = {s.label for s in samples}
            names = [n for n in names if n in seen]
        return MaterialDataset(samples, names)


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    """Rows are true classes, columns predicted classes."""

    counts: np.ndarray
    label_names: list

    @property
    def accuracy(self):
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0

    def to_csv(self):
        lines = ["true\\predicted," + ",".join(self.label_names)]
        for name, row in zip(self.label_names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def extract_features(params, center, w):
    """Window of side ``w`` around ``center = (x, y)`` from both maps."""
    if w < 1 or w % 2 == 0:
        raise InvalidArgumentError("window side must be a positive odd number")
    cx, cy = int(round(center[0])), int(round(center[1]))
    h = w // 2
    ny, nx = params.shape
    if cx - h < 0 or cy - h < 0 or cx + h >= nx or cy + h >= ny:
        raise InvalidArgumentError(f"{w}x{w} window at ({cx}, {cy}) leaves the {nx}x{ny} map")
    win = np.s_[cy - h:cy + h + 1, cx - h:cx + h + 1]
    return FeatureVector(np.concatenate([params.k[win].ravel(), params.eps_prime[win].ravel()]))


def _zscore_stats(X):
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    return mean, np.where(std > 0, std, 1.0)


@dataclass(frozen=True, eq=False)
class CentroidModel:
    mean: np.ndarray
    std: np.ndarray
    centroids: np.ndarray
    label_names: list


@dataclass(frozen=True, eq=False)
class MLPModel:
    mean: np.ndarray
    std: np.ndarray
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    label_names: list


def train_centroid(data):
    """Per-class mean of the z-scored training features."""
    X, y = data.X, data.y
    counts = np.bincount(y, minlength=len(data.label_names))
    if np.any(counts == 0):
        empty = [n for n, c in zip(data.label_names, counts) if c == 0]
        raise InvalidArgumentError(f"classes without samples: {empty}")
    mean, std = _zscore_stats(X)
    Z = (X - mean) / std
    centroids = np.stack([Z[y == c].mean(axis=0) for c in range(len(data.label_names))])
    return CentroidModel(mean, std, centroids, list(data.label_names))


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_mlp(data, hidden=90, epochs=500, lr=1e-2, seed=0):
    """One tanh hidden layer, softmax output, full-batch gradient descent.

    Weights are drawn from ``seed`` so two runs on the same data give
    identical models.
    """
    X, y = data.X, data.y
    n_classes = len(data.label_names)
    if len(np.unique(y)) < 2:
        raise InvalidArgumentError("MLP training needs at least two classes present")
    mean, std = _zscore_stats(X)
    Z = (X - mean) / std
    n, d = Z.shape
    rng = np.random.default_rng(seed)
    W1 = rng.normal(0.0, np.sqrt(1.0 / d), size=(d, hidden))
    b1 = np.zeros(hidden)
    W2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, n_classes))
    b2 = np.zeros(n_classes)
    onehot = np.eye(n_classes)[y]
    for _ in range(epochs):
        H = np.tanh(Z @ W1 + b1)
        P = _softmax(H @ W2 + b2)
        loss = -np.mean(np.log(np.maximum(P[np.arange(n), y], 1e-300)))
        if not np.isfinite(loss):
            raise TrainingError("MLP loss became non-finite")
        dlogits = (P - onehot) / n
        dW2 = H.T @ dlogits
        db2 = dlogits.sum(axis=0)
        dH = (dlogits @ W2.T) * (1.0 - H * H)
        dW1 = Z.T @ dH
        db1 = dH.sum(axis=0)
        W1 -= lr * dW1
        b1 -= lr * db1
        W2 -= lr * dW2
        b2 -= lr * db2
    return MLPModel(mean, std, W1, b1, W2, b2, list(data.label_names))


def predict(model, fv):
    """Label and per-class scores for one feature vector.

    Centroid scores are Euclidean distances (smallest wins); MLP scores are
    softmax probabilities (largest wins). Ties go to the lowest class index.
    """
    x = fv.values if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
    if x.size != model.mean.size:
        raise InvalidArgumentError(f"feature length {x.size} != model input {model.mean.size}")
    z = (x - model.mean) / model.std
    if isinstance(model, CentroidModel):
        scores = np.sqrt(np.sum((model.centroids - z) ** 2, axis=1))
        idx = int(np.argmin(scores))
    else:
        h = np.tanh(z @ model.W1 + model.b1)
        scores = _softmax((h @ model.W2 + model.b2)[None])[0]
        idx = int(np.argmax(scores))
    return model.label_names[idx], scores


def classify_sample(model, fv, measured=None, noise_floor_K=0.1, metal_flag=None):
    """Predict a label, routing flat (metal-like) captures to METAL_LABEL.

    Pass either ``metal_flag`` (e.g. from a RecoveryResult) or the measured
    stack so the flag can be computed here.
    """
    if metal_flag is None and measured is not None:
        metal_flag = detect_metal(measured, noise_floor_K)
    if metal_flag:
        return METAL_LABEL
    return predict(model, fv)[0]


def _train(kind, data, **hyper):
    if kind == "centroid":
        return train_centroid(data)
    if kind == "mlp":
        return train_mlp(data, **hyper)
    raise InvalidArgumentError(f"unknown classifier kind {kind!r}")


def loo_cv(data, kind="centroid", **hyper):
    """Leave-one-out confusion matrix for ``kind`` in {"centroid", "mlp"}.

    Each model only knows the classes present in its training split, so a
    class represented by the held-out sample alone cannot be predicted.
    """
    n = len(data.samples)
    if n < 2:
        raise InvalidArgumentError("leave-one-out needs at least two samples")
    k = len(data.label_names)
    counts = np.zeros((k, k), dtype=np.int64)
    y = data.y
    for i in range(n):
        rest = [j for j in range(n) if j != i]
        model = _train(kind, data.subset(rest, present_only=True), **hyper)
        label, _ = predict(model, data.samples[i])
        counts[y[i], data.label_names.index(label)] += 1
    return ConfusionMatrix(counts, list(data.label_names))


def confusion_from_predictions(true_labels, predicted_labels, label_names=None):
    """Confusion matrix from externally produced predictions."""
    if len(true_labels) != len(predicted_labels):
        raise InvalidArgumentError("true and predicted label lists differ in length")
    names = sorted(set(true_labels) | set(predicted_labels)) if label_names is None else list(label_names)
    index = {n: i for i, n in enumerate(names)}
    counts = np.zeros((len(names), len(names)), dtype=np.int64)
    for t, p in zip(true_labels, predicted_labels):
        counts[index[t], index[p]] += 1
    return ConfusionMatrix(counts, names)


def accuracy_table(entries):
    """CSV table of accuracies: rows are feature counts, columns classifiers.

    ``entries`` maps ``(n_features, classifier_name)`` to an accuracy in [0, 1].
    Missing cells are left empty.
    """
    feats = sorted({f for f, _ in entries})
    names = []
    for _, c in entries:
        if c not in names:
            names.append(c)
    lines = ["features," + ",".join(names)]
    for f in feats:
        cells = [f"{100 * entries[(f, c)]:.1f}%" if (f, c) in entries else "" for c in names]
        lines.append(f"{f}," + ",".join(cells))
    return "\n".join(lines) + "\n"
