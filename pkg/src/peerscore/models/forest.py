"""Bagged regression trees (random forest)."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..features import Dataset
from ._backend import kernels
from .base import ForestParams, ModelSpec, TrainedModel, check_rows


def tree_seed(master_seed: int, tree_index: int) -> int:
    """Per-tree seed; independent of build order or thread scheduling."""
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, tree_index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _grow(X, y, params: ForestParams, index: int):
    seed = tree_seed(params.seed, index)
    n = len(y)
    sample = np.random.default_rng(seed).integers(0, n, size=n).astype(np.int64)
    max_depth = -1 if params.max_depth is None else params.max_depth
    return kernels.build_tree(X, y, sample, params.min_leaf, max_depth,
                              params.mtry(X.shape[1]), seed)


def fit_forest(train: Dataset, hyperparams: ForestParams | None = None, seed: int | None = None,
               jobs: int = 1) -> TrainedModel:
    """Fit ``trees`` regression trees, each on its own bootstrap sample.

    Splits maximise variance reduction over a random subset of columns per
    node. Everything is determined by ``seed`` (which overrides
    ``hyperparams.seed`` when given); ``jobs`` only changes wall time.
    """
    params = hyperparams or ForestParams()
    if seed is not None:
        params = ForestParams(params.trees, params.max_depth, params.min_leaf,
                              params.feature_subsample, seed)
    params.validate()
    if len(train) == 0:
        raise ValueError("fit_forest needs at least one training row")
    X = np.ascontiguousarray(train.X, dtype=float)
    y = np.ascontiguousarray(train.y, dtype=float)
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            trees = list(pool.map(lambda i: _grow(X, y, params, i), range(params.trees)))
    else:
        trees = [_grow(X, y, params, i) for i in range(params.trees)]
    return TrainedModel(ModelSpec("forest", params), train.fingerprint, {"trees": trees})


def predict_forest(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    X = np.ascontiguousarray(X, dtype=float)
    if len(X) == 0:
        return np.empty(0)
    per_tree = np.stack([kernels.predict_tree(X, *tree) for tree in model.params["trees"]])
    mean = per_tree.sum(axis=0) / len(per_tree)
    return np.clip(mean, per_tree.min(axis=0), per_tree.max(axis=0))


def _predict(model: TrainedModel, rows: Dataset) -> np.ndarray:
    return predict_forest(model, check_rows(model, rows))
