from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import IO, Iterable, Sequence

import numpy as np

from ..features import Dataset

REPORT_COLUMNS = ("model", "w_B", "remembrance", "train_duration_s", "mae", "median",
                  "q1", "q3", "ci95_lo", "ci95_hi", "n", "status")

Z95 = 1.96


def split_chronological(dataset: Dataset, train_fraction: float = 0.8) -> tuple[Dataset, Dataset]:
    """First ``ceil(n * train_fraction)`` rows train, the rest test; no shuffling."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must be in (0, 1)")
    n = len(dataset)
    cut = math.ceil(n * train_fraction - 1e-9)
    if cut < 1 or cut >= n:
        raise ValueError(f"{n} rows cannot be split into non-empty train and test sets")
    return dataset.take(slice(0, cut)), dataset.take(slice(cut, n))


def truncate_training(train: Dataset, duration_s: float) -> Dataset:
    """Rows whose window ends within ``duration_s`` of the first row's."""
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    if len(train) == 0:
        return train
    keep = int(np.searchsorted(train.window_end, train.window_end[0] + duration_s, side="right"))
    return train.take(slice(0, keep))


@dataclass
class EvalReport:
    mae: float
    median_abs_err: float
    q1: float
    q3: float
    ci95_lo: float
    ci95_hi: float
    n: int
    model: str = ""
    w_block: float = math.nan
    remembrance: bool | None = None
    train_duration_s: float = math.nan
    status: str = "ok"

    def row(self) -> list[str]:
        def num(x):
            return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))
        rem = "" if self.remembrance is None else ("on" if self.remembrance else "off")
        return [self.model, num(self.w_block), rem, num(self.train_duration_s), num(self.mae),
                num(self.median_abs_err), num(self.q1), num(self.q3), num(self.ci95_lo),
                num(self.ci95_hi), str(self.n), self.status]

    def as_dict(self) -> dict:
        return asdict(self)


def insufficient(model: str = "", w_block: float = math.nan, remembrance: bool | None = None,
                 train_duration_s: float = math.nan) -> EvalReport:
    nan = math.nan
    return EvalReport(nan, nan, nan, nan, nan, nan, 0, model, w_block, remembrance,
                      train_duration_s, "insufficient_data")


def evaluate(
    predictions: Sequence[float],
    labels: Sequence[float],
    groups: Sequence | None = None,
    **config,
) -> EvalReport:
    """Absolute-error summary of predictions against labels.

    Quartiles use linear interpolation. The 95% interval is the normal
    approximation ``mae +- 1.96 * std(|err|, ddof=1) / sqrt(n)``. When
    ``groups`` (e.g. peer identities) is given, MAE and its interval are taken
    over per-group MAEs; quartiles stay pooled. ``config`` fills the report's
    model/w_block/remembrance/train_duration_s fields.
    """
    pred = np.asarray(predictions, dtype=float)
    lab = np.asarray(labels, dtype=float)
    if pred.shape != lab.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {lab.shape} labels")
    n = pred.size
    if n == 0:
        raise ValueError("cannot evaluate zero predictions")
    err = np.abs(lab - pred)
    q1, median, q3 = np.percentile(err, [25, 50, 75])
    sample = err
    if groups is not None:
        groups = np.asarray(groups)
        if groups.shape != err.shape:
            raise ValueError("groups must align with predictions")
        _, inv = np.unique(groups, return_inverse=True)
        sample = np.bincount(inv, weights=err) / np.bincount(inv)
    mae = float(sample.mean())
    sd = float(sample.std(ddof=1)) if sample.size > 1 else 0.0
    half = Z95 * sd / math.sqrt(sample.size)
    return EvalReport(mae, float(median), float(q1), float(q3), mae - half, mae + half, int(n),
                      **config)


def write_report(reports: Iterable[EvalReport], out: IO[str]) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in reports:
        writer.writerow(r.row())
