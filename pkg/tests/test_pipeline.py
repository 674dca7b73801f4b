import math

import pytest

from peerscore.features import MeasurementSample
from peerscore.models import EvalReport, ModelSpec
from peerscore.pipeline import SweepGrid, build_dataset, cell_seed, run_cell, summarize, sweep
from peerscore.scoring import ScoreConfig


def sample(t, token="a"):
    return MeasurementSample("p", t, {"x": t}, {"c": token}, t - 1.0, 2.0 * t)


class TestGrid:
    def test_default_size_and_order(self):
        g = SweepGrid(models=("linear", "knn"))
        assert len(g) == len(g.cells()) == 120
        assert g.cells()[0] == ("linear", 0.0, True, 40.0)

    @pytest.mark.parametrize("kw", [{"w_block": ()}, {"w_block": (1.5,)}, {"models": ("svm",)},
                                    {"durations": (0.0,)}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SweepGrid(**kw).validate()

    def test_cell_seed(self):
        assert cell_seed(1, 2) == cell_seed(1, 2)
        assert len({cell_seed(1, i) for i in range(50)}) == 50


def test_encoder_fitted_on_training_prefix():
    samples = [sample(float(t)) for t in range(8)] + [sample(8.0, "new"), sample(9.0, "new")]
    train, test = build_dataset(samples, include_remembrance=True)
    assert (len(train), len(test)) == (8, 2)
    assert train.columns == ["x", "c=a", "remembrance"]
    assert test.X[:, 1].tolist() == [0.0, 0.0]


def test_build_dataset_too_small():
    with pytest.raises(ValueError):
        build_dataset([sample(0.0)], True)


def test_insufficient_data():
    train, test = build_dataset([sample(float(t)) for t in range(10)], True)
    r = run_cell(train, test, ModelSpec("knn", {"k": 5}), 2.0, 0)
    assert r.status == "insufficient_data" and r.n == 0 and math.isnan(r.mae)
    assert run_cell(train, test, ModelSpec("linear"), 2.0, 0).status == "ok"


def test_summarize_ratio():
    reps = [EvalReport(1e-12, 0, 0, 0, 0, 0, 5, "linear", 0.5, True, 40.0),
            EvalReport(1.0, 0, 0, 0, 0, 0, 5, "linear", 0.5, False, 40.0)]
    ((model, with_, without, ratio),) = summarize(reps)
    assert model == "linear" and ratio == pytest.approx(1e12)


def test_sweep_jobs_invariant(short_trace):
    events, _ = short_trace
    grid = SweepGrid(w_block=(0.5,), models=("linear", "forest"), durations=(200.0, 1000.0))
    specs = {"forest": ModelSpec("forest", {"trees": 5})}
    cfg = ScoreConfig(fee_scale=1e4)
    a = sweep(events, grid, cfg, seed=3, specs=specs, jobs=1)
    b = sweep(events, grid, cfg, seed=3, specs=specs, jobs=3)
    assert [r.row() for r in a] == [r.row() for r in b]
    assert [(r.model, r.remembrance, r.train_duration_s) for r in a][:4] == \
        [("linear", True, 200.0), ("linear", True, 1000.0), ("linear", False, 200.0), ("linear", False, 1000.0)]
