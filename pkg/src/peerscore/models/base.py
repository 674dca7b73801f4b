from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from ..features import Dataset

KINDS = ("linear", "knn", "forest")


class SchemaFingerprintError(ValueError):
    pass


@dataclass(frozen=True)
class LinearParams:
    ridge_eps: float = 1e-8

    def validate(self):
        if not self.ridge_eps >= 0:
            raise ValueError("ridge_eps must be >= 0")


@dataclass(frozen=True)
class KnnParams:
    k: int = 5
    standardize: bool = False

    def validate(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError("k must be an integer >= 1")


@dataclass(frozen=True)
class ForestParams:
    trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 2
    feature_subsample: float = 1 / 3
    seed: int = 0

    def validate(self):
        if int(self.trees) != self.trees or self.trees < 1:
            raise ValueError("trees must be an integer >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if int(self.min_leaf) != self.min_leaf or self.min_leaf < 1:
            raise ValueError("min_leaf must be an integer >= 1")
        if not 0 < self.feature_subsample <= 1:
            raise ValueError("feature_subsample must be in (0, 1]")

    def mtry(self, n_features: int) -> int:
        return max(1, math.floor(self.feature_subsample * n_features + 1e-9))


_PARAMS = {"linear": LinearParams, "knn": KnnParams, "forest": ForestParams}


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    hyperparams: Any = None

    def __post_init__(self):
        if self.kind not in _PARAMS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        params = self.hyperparams
        if params is None:
            params = _PARAMS[self.kind]()
        elif isinstance(params, dict):
            params = _PARAMS[self.kind](**params)
        elif not isinstance(params, _PARAMS[self.kind]):
            raise TypeError(f"hyperparams for {self.kind} must be {_PARAMS[self.kind].__name__}")
        params.validate()
        object.__setattr__(self, "hyperparams", params)


@dataclass
class TrainedModel:
    spec: ModelSpec
    fingerprint: str
    params: dict = field(default_factory=dict)


def check_rows(model: TrainedModel, rows: Dataset) -> np.ndarray:
    if rows.fingerprint != model.fingerprint:
        raise SchemaFingerprintError(
            f"schema fingerprint {rows.fingerprint} does not match model {model.fingerprint}")
    return np.ascontiguousarray(rows.X, dtype=float)
