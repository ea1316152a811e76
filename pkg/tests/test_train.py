import csv

import numpy as np
import pytest
import torch

from cofm.objectives import ObjectiveConfig
from cofm.train import (
    METRIC_COLUMNS, PRESETS, Checkpoint, ModelConfig, NonFiniteLossError, TaskConfig, TrainConfig, build_task,
    evaluate, make_eval_set, preset, train, write_metrics_csv,
)
from cofm.transport import GaussianSpec


def tiny(**kw) -> TrainConfig:
    base = dict(
        batch_size=32, iterations=12, eval_every=5, eval_samples=64, gap_samples=16, pairing="emd",
        model=ModelConfig(hidden_width=8, num_layers=3, time_width=4, time_layers=1),
    )
    base.update(kw)
    return TrainConfig(**base)


def _strip_wall(log):
    return [{k: v for k, v in row.items() if k != "wall_ms"} for row in log]


@pytest.mark.parametrize("hj", ["residual", "pushforward"])
def test_identical_runs(hj):
    cfg = tiny(objective=ObjectiveConfig(hj=hj))
    a, b = train(cfg), train(cfg)
    assert _strip_wall(a.metric_log) == _strip_wall(b.metric_log)
    assert np.array_equal(a.loss_history, b.loss_history)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    c = train(tiny(seed=1, objective=ObjectiveConfig(hj=hj)))
    assert not np.array_equal(a.loss_history, c.loss_history)


def test_metric_rows():
    ck = train(tiny())
    assert [r["iteration"] for r in ck.metric_log] == [0, 5, 10, 12]
    assert ck.metric_log[0]["loss_total"] is None
    assert all(set(r) == set(METRIC_COLUMNS) for r in ck.metric_log)
    assert ck.loss_history.shape == (12, 3)


def test_resume_is_bit_exact(tmp_path):
    cfg = tiny(iterations=14, pairing="random")
    full = train(cfg)
    half = train(tiny(iterations=6, pairing="random"))
    path = half.save(tmp_path / "half.cofm")
    resumed = train(cfg, resume=Checkpoint.load(path))
    assert resumed.iteration == 14
    assert np.array_equal(resumed.loss_history, full.loss_history)
    assert all(np.array_equal(resumed.params[k], full.params[k]) for k in full.params)
    assert all(np.array_equal(resumed.adam[k], full.adam[k]) for k in full.adam)


def test_checkpoint_bytes_round_trip(tmp_path):
    ck = train(tiny(iterations=3))
    data = ck.to_bytes()
    back = Checkpoint.from_bytes(data)
    assert back.to_bytes() == data
    assert back.config == ck.config
    x = np.random.default_rng(0).standard_normal((5, 2))
    t = torch.zeros(5, dtype=torch.float64)
    xt = torch.as_tensor(x)
    assert torch.equal(back.model()(t, xt), Checkpoint.load(ck.save(tmp_path / "c.cofm")).model()(t, xt))


def test_zero_iterations_returns_initial_state():
    ck = train(tiny(iterations=0))
    assert ck.iteration == 0 and ck.metric_log == [] and ck.loss_history.shape == (0, 3)


def test_divergence_raises_and_keeps_partial(tmp_path):
    cfg = tiny(lr=1e6, iterations=30)
    with pytest.raises(NonFiniteLossError) as info:
        train(cfg, checkpoint_path=tmp_path / "ck.cofm")
    assert "iteration" in str(info.value)
    partial = Checkpoint.load(tmp_path / "ck.partial.cofm")
    assert all(np.isfinite(v).all() for v in partial.params.values())


def test_gauss2d_task_ground_truth():
    task = build_task(TaskConfig("gauss2d"))
    cov = task.target.cov
    a = task.T_star.matrix
    assert np.allclose(a @ a, cov)
    assert task.var_p1 == pytest.approx(3.0)
    assert isinstance(GaussianSpec(task.target.mean, cov), GaussianSpec)


def test_evaluate_keys():
    cfg = tiny()
    task = build_task(cfg.task)
    ck = train(tiny(iterations=0))
    m = evaluate(ck.model(), task, make_eval_set(cfg, task))
    assert set(m) == {"l2_uvp", "cosine", "dual_gap", "w2"}
    assert m["l2_uvp"] > 0 and m["w2"] > 0


def test_metrics_csv(tmp_path):
    ck = train(tiny(iterations=5))
    path = write_metrics_csv(tmp_path / "m.csv", ck.metric_log)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert rows[1][2] == ""  # no loss before the first step
    assert float(rows[-1][2]) == ck.metric_log[-1]["loss_total"]


def test_presets_and_validation():
    for name in PRESETS:
        assert isinstance(preset(name), TrainConfig)
    assert preset("bench_d64").task.dim == 64
    with pytest.raises(ValueError):
        preset("nope")
    with pytest.raises(ValueError):
        TrainConfig(pairing="greedy")
    with pytest.raises(ValueError):
        TaskConfig("gauss2d", dim=3)
    assert TrainConfig(**TrainConfig().to_dict()) == TrainConfig()
