"""Ordinary least squares with intercept via column-pivoted QR.

Columns are centred and scaled before factorising; constant columns get a zero
coefficient. When the pivoted factorisation reports rank deficiency the
solution is the ridge one, ``(Z'Z + eps I) b = Z'y``, computed as the
equivalent augmented least-squares problem so the normal equations are never
formed. Two rounds of iterative refinement follow either solve.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg

from ..features import Dataset
from .base import LinearParams, ModelSpec, TrainedModel, check_rows

REFINEMENT_STEPS = 2


def _rank(R: np.ndarray, shape: tuple[int, int]) -> int:
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0:
        return 0
    tol = max(shape) * np.finfo(float).eps * diag[0]
    return int(np.sum(diag > tol))


def _lstsq_qr(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    Q, R = np.linalg.qr(A, mode="reduced")
    x = scipy.linalg.solve_triangular(R, Q.T @ b)
    for _ in range(REFINEMENT_STEPS):
        x += scipy.linalg.solve_triangular(R, Q.T @ (b - A @ x))
    return x


def fit_linear(train: Dataset, ridge_eps: float = 1e-8) -> TrainedModel:
    params = LinearParams(ridge_eps)
    params.validate()
    X = np.asarray(train.X, dtype=float)
    y = np.asarray(train.y, dtype=float)
    n, p = X.shape
    if n == 0:
        raise ValueError("fit_linear needs at least one training row")

    x_mean = X.mean(axis=0)
    x_scale = X.std(axis=0)
    keep = np.ptp(X, axis=0) > 0
    y_mean = y.mean()
    yc = y - y_mean
    beta = np.zeros(p)
    rank = 0
    ridge = False
    if keep.any():
        Z = (X[:, keep] - x_mean[keep]) / x_scale[keep]
        _, R, _ = scipy.linalg.qr(Z, mode="economic", pivoting=True)
        rank = _rank(R, Z.shape)
        if rank == Z.shape[1]:
            b = _lstsq_qr(Z, yc)
        else:
            ridge = True
            k = Z.shape[1]
            A = np.vstack([Z, np.sqrt(ridge_eps) * np.eye(k)])
            b = _lstsq_qr(A, np.concatenate([yc, np.zeros(k)]))
        beta[keep] = b
    if not np.all(np.isfinite(beta)):
        raise FloatingPointError("linear fit produced non-finite coefficients")

    scale = np.where(keep, x_scale, 1.0)
    coef = beta / scale
    intercept = y_mean - float(coef @ x_mean)
    return TrainedModel(
        ModelSpec("linear", params),
        train.fingerprint,
        {
            "coef": coef,
            "intercept": intercept,
            "x_mean": x_mean,
            "x_scale": scale,
            "y_mean": y_mean,
            "beta": beta,
            "rank": rank,
            "ridge": ridge,
        },
    )


def predict_linear(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = model.params
    # centred form keeps large-offset columns (timestamps) from cancelling
    return p["y_mean"] + ((X - p["x_mean"]) / p["x_scale"]) @ p["beta"]


def _predict(model: TrainedModel, rows: Dataset) -> np.ndarray:
    return predict_linear(model, check_rows(model, rows))
