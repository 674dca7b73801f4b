"""Glue between scoring, features and models: dataset preparation and grid sweeps."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .features import Dataset, MeasurementSample, encode, extract_windows, fit_encoder
from .models import ModelSpec, evaluate, fit, insufficient, predict, split_chronological, truncate_training
from .models.evaluation import EvalReport
from .scoring import ScoreConfig
from .trace import ObservationEvent

DEFAULT_W_BLOCK = (0.0, 0.25, 0.5, 0.75, 1.0)
DEFAULT_DURATIONS = (40.0, 200.0, 1000.0, 5000.0, 25000.0, 125000.0)
MODEL_KINDS = ("linear", "knn", "forest")


def build_dataset(
    samples: Sequence[MeasurementSample],
    include_remembrance: bool,
    train_fraction: float = 0.8,
) -> tuple[Dataset, Dataset]:
    """Encode samples and split them chronologically into train and test.

    The categorical vocabulary is fitted on the training prefix only, so test
    rows with unseen tokens encode as all-zero blocks.
    """
    ordered = sorted(samples, key=lambda s: s.window_end)
    n = len(ordered)
    cut = math.ceil(n * train_fraction - 1e-9)
    if cut < 1 or cut >= n:
        raise ValueError(f"{n} samples cannot be split into non-empty train and test sets")
    schema = fit_encoder(ordered[:cut])
    return split_chronological(encode(schema, ordered, include_remembrance), train_fraction)


@dataclass(frozen=True)
class SweepGrid:
    w_block: tuple[float, ...] = DEFAULT_W_BLOCK
    remembrance: tuple[bool, ...] = (True, False)
    models: tuple[str, ...] = ("linear",)
    durations: tuple[float, ...] = DEFAULT_DURATIONS

    def validate(self) -> None:
        for name in ("w_block", "remembrance", "models", "durations"):
            if not getattr(self, name):
                raise ValueError(f"sweep axis {name} is empty")
        for w in self.w_block:
            if not 0.0 <= w <= 1.0:
                raise ValueError(f"w_B value {w} outside [0, 1]")
        for m in self.models:
            if m not in MODEL_KINDS:
                raise ValueError(f"unknown model {m!r}")
        for d in self.durations:
            if not d > 0:
                raise ValueError(f"training duration {d} must be > 0")

    def cells(self) -> list[tuple[str, float, bool, float]]:
        return [(m, w, r, d) for w in self.w_block for r in self.remembrance
                for m in self.models for d in self.durations]

    def __len__(self) -> int:
        return len(self.w_block) * len(self.remembrance) * len(self.models) * len(self.durations)


def cell_seed(master_seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(master_seed) & 0xFFFFFFFF, index])
    return int(ss.generate_state(1)[0])


def run_cell(
    train: Dataset,
    test: Dataset,
    spec: ModelSpec,
    duration_s: float,
    seed: int,
    per_peer: bool = False,
    w_block: float = math.nan,
) -> EvalReport:
    meta = dict(model=spec.kind, w_block=w_block, remembrance=train.remembrance_included,
                train_duration_s=duration_s)
    part = truncate_training(train, duration_s)
    if len(part) == 0 or (spec.kind == "knn" and len(part) < spec.hyperparams.k):
        return insufficient(**meta)
    model = fit(spec, part, seed)
    pred = predict(model, test)
    return evaluate(pred, test.y, test.peers if per_peer else None, **meta)


def sweep(
    events: Sequence[ObservationEvent],
    grid: SweepGrid,
    config: ScoreConfig,
    seed: int = 0,
    specs: dict[str, ModelSpec] | None = None,
    jobs: int = 1,
    per_peer: bool = False,
) -> list[EvalReport]:
    """Evaluate every grid cell and return reports sorted by (model, w_B, remembrance, duration).

    Cell ``i`` of :meth:`SweepGrid.cells` trains with seed
    ``cell_seed(seed, i)``, so results do not depend on ``jobs``.
    """
    grid.validate()
    specs = {m: (specs or {}).get(m) or ModelSpec(m) for m in grid.models}
    cells = grid.cells()
    splits: dict[tuple[float, bool], tuple[Dataset, Dataset]] = {}
    for w in dict.fromkeys(grid.w_block):
        samples = extract_windows(events, replace(config, w_block=w))
        for r in grid.remembrance:
            splits[(w, r)] = build_dataset(samples, r)

    def work(i: int) -> EvalReport:
        m, w, r, d = cells[i]
        train, test = splits[(w, r)]
        return run_cell(train, test, specs[m], d, cell_seed(seed, i), per_peer, w)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            reports = list(pool.map(work, range(len(cells))))
    else:
        reports = [work(i) for i in range(len(cells))]
    order = {m: i for i, m in enumerate(MODEL_KINDS)}
    reports.sort(key=lambda r: (order[r.model], r.w_block, not r.remembrance, r.train_duration_s))
    return reports


def summarize(reports: Sequence[EvalReport]) -> list[tuple[str, float, float, float]]:
    """Per model: mean MAE with remembrance, without, and the without/with ratio.

    Only cells evaluated in both settings count; cells with
    insufficient data are skipped.
    """
    out = []
    for model in dict.fromkeys(r.model for r in reports):
        keyed = {(r.w_block, r.train_duration_s, r.remembrance): r.mae
                 for r in reports if r.model == model and r.status == "ok"}
        pairs = [(keyed[(w, d, True)], keyed[(w, d, False)])
                 for (w, d, rem) in keyed if rem and (w, d, False) in keyed]
        if not pairs:
            continue
        with_ = float(np.mean([p[0] for p in pairs]))
        without = float(np.mean([p[1] for p in pairs]))
        ratio = without / with_ if with_ > 0 else math.inf
        out.append((model, with_, without, ratio))
    return out
