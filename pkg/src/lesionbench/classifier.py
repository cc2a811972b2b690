"""Exact k-nearest-neighbour voxel classifier over simple patch features.

Each patch is summarised per channel by its center intensity, mean and
(population) variance.  Features are standardized with the training mean and
standard deviation; features with zero training variance are dropped.  The
lesion probability of a query is the fraction of lesion labels among its k
nearest training vectors (Euclidean), ties at equal distance resolved in
training insertion order.

Any object with ``values`` of shape ``(n, c, e, e, e)`` and ``labels`` of
shape ``(n,)`` works as a patch batch here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from lesionbench.errors import LesionBenchError

FEATURES_PER_CHANNEL = ("center", "mean", "var")
_QUERY_CHUNK = 512


def patch_features(values: np.ndarray) -> np.ndarray:
    """(n, c, e, e, e) patch values -> (n, 3c) raw features."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 5:
        raise LesionBenchError("feature-mismatch", f"expected (n, c, e, e, e) patch values, got {values.shape}")
    n, c, e = values.shape[:3]
    h = e // 2
    flat = values.reshape(n, c, -1)
    center = values[:, :, h, h, h]
    mean = flat.mean(axis=2)
    var = flat.var(axis=2)
    return np.stack([center, mean, var], axis=2).reshape(n, 3 * c)


@dataclass
class KnnModel:
    k: int
    features: np.ndarray = field(repr=False)  # standardized, kept columns only
    labels: np.ndarray = field(repr=False)
    mean: np.ndarray = field(repr=False)
    sd: np.ndarray = field(repr=False)
    kept: np.ndarray = field(repr=False)  # indices of retained raw features
    n_channels: int
    edge: int

    @property
    def dropped(self) -> list[int]:
        return sorted(set(range(3 * self.n_channels)) - set(self.kept.tolist()))

    def standardize(self, raw: np.ndarray) -> np.ndarray:
        return (raw[:, self.kept] - self.mean) / self.sd

    def to_payload(self) -> dict[str, np.ndarray]:
        return {
            "k": np.array(self.k),
            "features": self.features,
            "labels": self.labels,
            "mean": self.mean,
            "sd": self.sd,
            "kept": self.kept,
            "n_channels": np.array(self.n_channels),
            "edge": np.array(self.edge),
        }

    @classmethod
    def from_payload(cls, p: dict[str, np.ndarray]) -> "KnnModel":
        return cls(
            k=int(p["k"]),
            features=np.asarray(p["features"], dtype=np.float64),
            labels=np.asarray(p["labels"], dtype=np.uint8),
            mean=np.asarray(p["mean"], dtype=np.float64),
            sd=np.asarray(p["sd"], dtype=np.float64),
            kept=np.asarray(p["kept"], dtype=np.int64),
            n_channels=int(p["n_channels"]),
            edge=int(p["edge"]),
        )


def knn_fit_features(raw: np.ndarray, labels, k: int, n_channels: int, edge: int) -> KnnModel:
    raw = np.asarray(raw, dtype=np.float64)
    labels = (np.asarray(labels) != 0).astype(np.uint8)
    n = len(labels)
    if k < 1:
        raise LesionBenchError("k-too-large", f"k must be positive, got {k}")
    if k > n:
        raise LesionBenchError("k-too-large", f"k={k} exceeds {n} training patches")
    if labels.min() == labels.max():
        raise LesionBenchError("degenerate-labels", "training patches contain a single class")
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    kept = np.flatnonzero(sd > 0)
    features = (raw[:, kept] - mean[kept]) / sd[kept]
    return KnnModel(k, features, labels, mean[kept], sd[kept], kept, n_channels, edge)


def knn_train(patches, k: int = 5, seed: int = 0) -> KnnModel:
    """Fit an exact kNN model on a labeled patch batch.

    ``seed`` is accepted for interface symmetry with other classifiers;
    exact kNN fitting involves no randomness.
    """
    values = np.asarray(patches.values)
    if patches.labels is None:
        raise LesionBenchError("degenerate-labels", "training patches must be labeled")
    return knn_fit_features(patch_features(values), patches.labels, k, values.shape[1], values.shape[2])


def knn_neighbors(model: KnnModel, queries: np.ndarray) -> np.ndarray:
    """Indices (m, k) of the k nearest training vectors to standardized queries."""
    out = np.empty((len(queries), model.k), dtype=np.int64)
    for start in range(0, len(queries), _QUERY_CHUNK):
        q = queries[start : start + _QUERY_CHUNK]
        d2 = ((q[:, None, :] - model.features[None, :, :]) ** 2).sum(axis=2)
        out[start : start + len(q)] = np.argsort(d2, axis=1, kind="stable")[:, : model.k]
    return out


def knn_predict_values(model: KnnModel, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values)
    if values.ndim != 5 or values.shape[1] != model.n_channels or values.shape[2] != model.edge:
        raise LesionBenchError(
            "feature-mismatch",
            f"model expects {model.n_channels} channels of edge {model.edge}, got patches {values.shape[1:]}",
        )
    if len(values) == 0:
        return np.zeros(0, dtype=np.float64)
    idx = knn_neighbors(model, model.standardize(patch_features(values)))
    return model.labels[idx].sum(axis=1) / model.k


def knn_predict(model: KnnModel, patch) -> float:
    """Lesion probability of a single patch (``values`` shaped (c, e, e, e))."""
    return float(knn_predict_values(model, np.asarray(patch.values)[None])[0])


class KnnClassifier:
    """Pluggable cascade stage backed by :class:`KnnModel`."""

    name = "knn"

    def __init__(self, k: int = 5):
        self.k = k
        self.model: KnnModel | None = None

    def fit(self, patches, seed: int = 0) -> "KnnClassifier":
        self.model = knn_train(patches, self.k, seed)
        return self

    def predict_proba(self, patches) -> np.ndarray:
        if self.model is None:
            raise LesionBenchError("not-trained", "classifier has not been fitted")
        return knn_predict_values(self.model, patches.values)

    def to_payload(self) -> dict[str, np.ndarray]:
        return self.model.to_payload()

    @classmethod
    def from_payload(cls, payload: dict[str, np.ndarray]) -> "KnnClassifier":
        clf = cls(int(payload["k"]))
        clf.model = KnnModel.from_payload(payload)
        return clf


CLASSIFIERS = {"knn": KnnClassifier}
