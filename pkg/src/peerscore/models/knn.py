"""k-nearest-neighbour regression on Euclidean distance."""

from __future__ import annotations

import numpy as np

from ..features import Dataset
from ._backend import kernels
from .base import KnnParams, ModelSpec, TrainedModel, check_rows


def fit_knn(train: Dataset, k: int = 5, standardize: bool = False) -> TrainedModel:
    """Store the training rows.

    Prediction averages the labels of the ``k`` closest rows, closest first,
    with equal distances resolved in favour of the earlier row. With
    ``standardize=False`` distances use raw column units.
    """
    params = KnnParams(k, standardize)
    params.validate()
    n = len(train)
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} training rows")
    X = np.ascontiguousarray(train.X, dtype=float)
    mean = np.zeros(X.shape[1])
    scale = np.ones(X.shape[1])
    if standardize:
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        X = np.ascontiguousarray((X - mean) / scale)
    col = int(np.argmax(X.var(axis=0))) if X.shape[1] else 0
    order = np.argsort(X[:, col], kind="stable").astype(np.int64) if X.shape[1] else np.arange(n)
    return TrainedModel(
        ModelSpec("knn", params),
        train.fingerprint,
        {
            "X": X,
            "y": np.ascontiguousarray(train.y, dtype=float),
            "mean": mean,
            "scale": scale,
            "col": col,
            "order": order,
            "proj": np.ascontiguousarray(X[order, col]) if X.shape[1] else np.zeros(n),
        },
    )


def predict_knn(model: TrainedModel, Q: np.ndarray) -> np.ndarray:
    p = model.params
    if len(Q) == 0:
        return np.empty(0)
    if p["X"].shape[1] == 0:
        return np.full(len(Q), p["y"][: model.spec.hyperparams.k].mean())
    if model.spec.hyperparams.standardize:
        Q = (Q - p["mean"]) / p["scale"]
    Q = np.ascontiguousarray(Q, dtype=float)
    return kernels.knn_predict(p["X"], p["y"], Q, model.spec.hyperparams.k,
                               p["col"], p["order"], p["proj"])


def _predict(model: TrainedModel, rows: Dataset) -> np.ndarray:
    return predict_knn(model, check_rows(model, rows))
