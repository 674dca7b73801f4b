"""Regressors predicting the beneficialness score, and their evaluation."""

from __future__ import annotations

import numpy as np

from ..features import Dataset
from . import forest, knn, linear
from ._backend import BACKEND
from .base import (
    KINDS,
    ForestParams,
    KnnParams,
    LinearParams,
    ModelSpec,
    SchemaFingerprintError,
    TrainedModel,
)
from .evaluation import (
    REPORT_COLUMNS,
    EvalReport,
    evaluate,
    insufficient,
    split_chronological,
    truncate_training,
    write_report,
)
from .forest import fit_forest
from .knn import fit_knn
from .linear import fit_linear

__all__ = [
    "BACKEND",
    "KINDS",
    "ForestParams",
    "KnnParams",
    "LinearParams",
    "ModelSpec",
    "SchemaFingerprintError",
    "TrainedModel",
    "REPORT_COLUMNS",
    "EvalReport",
    "evaluate",
    "insufficient",
    "split_chronological",
    "truncate_training",
    "write_report",
    "fit",
    "fit_forest",
    "fit_knn",
    "fit_linear",
    "predict",
]

_PREDICT = {"linear": linear._predict, "knn": knn._predict, "forest": forest._predict}


def fit(spec: ModelSpec, train: Dataset, seed: int | None = None) -> TrainedModel:
    hp = spec.hyperparams
    if spec.kind == "linear":
        return fit_linear(train, hp.ridge_eps)
    if spec.kind == "knn":
        return fit_knn(train, hp.k, hp.standardize)
    return fit_forest(train, hp, seed)


def predict(model: TrainedModel, rows: Dataset) -> np.ndarray:
    """One prediction per row, in row order."""
    return _PREDICT[model.spec.kind](model, rows)
