"""Deterministic training loop with Adam, periodic evaluation and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import container
from .bench import BenchmarkInstance, DistributionSpec, make_benchmark, sample
from .diffcore import DTYPE, NumericOverflowError
from .objectives import ObjectiveConfig, PairBatch, sample_times, total_loss
from .picnn import PICNN, PicnnConfig
from .transport import (
    ConvergenceError,
    GaussianSpec,
    cosine_metric,
    dual_gap_estimate,
    emd_pairing,
    empirical_w2,
    gaussian_ot_map,
    l2_uvp,
    potential_map,
)

log = logging.getLogger(__name__)

PAIRING_MODES = ("random", "emd")
METRIC_COLUMNS = ("iteration", "wall_ms", "loss_total", "loss_fm", "loss_hj", "l2_uvp", "dual_gap", "w2")
TASKS = ("gauss2d", "eight_gauss", "bench")

GAUSS2D_MEAN = (3.0, 1.0)
GAUSS2D_COV = ((2.0, 0.8), (0.8, 1.0))


class NonFiniteLossError(NumericOverflowError):
    """Training produced a non-finite loss or parameter."""


@dataclass
class ModelConfig:
    hidden_width: int = 128
    num_layers: int = 4
    time_width: int = 64
    time_layers: int = 2

    def __post_init__(self):
        if self.num_layers < 2 or self.hidden_width < 1 or self.time_width < 1 or self.time_layers < 0:
            raise ValueError("model needs num_layers >= 2 and positive widths")

    def picnn(self, dim: int) -> PicnnConfig:
        return PicnnConfig(
            dim,
            hidden=(self.hidden_width,) * (self.num_layers - 1),
            time_hidden=(self.time_width,) * self.time_layers,
        )


@dataclass
class TaskConfig:
    name: str = "gauss2d"
    dim: int = 2
    bench_seed: int = 0

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.name!r}")
        if self.name in ("gauss2d", "eight_gauss") and self.dim != 2:
            raise ValueError(f"task {self.name} is two-dimensional")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1024
    iterations: int = 200_000
    pairing: str = "random"
    seed: int = 0
    eval_every: int = 1000
    eval_samples: int = 1024
    gap_samples: int = 256
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 0.0
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    task: TaskConfig = field(default_factory=TaskConfig)

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.iterations < 0 or self.eval_every < 1:
            raise ValueError("iterations must be >= 0 and eval_every >= 1")
        if self.pairing not in PAIRING_MODES:
            raise ValueError(f"pairing must be one of {PAIRING_MODES}, got {self.pairing!r}")
        if self.clip < 0:
            raise ValueError("clip must be >= 0 (0 disables clipping)")
        if isinstance(self.objective, dict):
            self.objective = ObjectiveConfig(**self.objective)
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)
        if isinstance(self.task, dict):
            self.task = TaskConfig(**self.task)

    def to_dict(self) -> dict:
        return asdict(self)


def preset(name: str) -> TrainConfig:
    """Desk-scale recipes sized for a single CPU core."""
    small = ModelConfig(hidden_width=64, num_layers=4, time_width=32, time_layers=2)
    if name == "gauss2d":
        return TrainConfig(
            batch_size=256, iterations=5000, pairing="emd", eval_every=500, model=small,
            objective=ObjectiveConfig(hj="residual"), task=TaskConfig("gauss2d", 2),
        )
    if name == "eight_gauss":
        return TrainConfig(
            batch_size=256, iterations=20000, pairing="emd", eval_every=2000, model=small,
            objective=ObjectiveConfig(hj="residual"), task=TaskConfig("eight_gauss", 2),
        )
    if name.startswith("bench_d"):
        dim = int(name[len("bench_d"):])
        iters = {2: 10000, 16: 20000, 64: 50000}.get(dim, 20000)
        return TrainConfig(
            batch_size=256, iterations=iters, pairing="emd", eval_every=max(1000, iters // 10),
            objective=ObjectiveConfig(hj="residual", hj_weight=10.0), task=TaskConfig("bench", dim),
        )
    if name == "full_scale":
        return TrainConfig(objective=ObjectiveConfig(hj="pushforward"), task=TaskConfig("bench", 16))
    raise ValueError(f"unknown preset {name!r}")


PRESETS = ("gauss2d", "eight_gauss", "bench_d2", "bench_d16", "bench_d64", "full_scale")


# --- tasks ------------------------------------------------------------------


@dataclass
class Task:
    source: DistributionSpec
    target: DistributionSpec
    T_star: Callable[[np.ndarray], np.ndarray] | None = None
    var_p1: float | None = None
    benchmark: BenchmarkInstance | None = None

    @property
    def dim(self) -> int:
        return self.source.dim


def build_task(cfg: TaskConfig, benchmark: BenchmarkInstance | None = None) -> Task:
    if cfg.name == "gauss2d":
        src = DistributionSpec("standard_normal", 2)
        dst = DistributionSpec("gaussian", 2, mean=np.array(GAUSS2D_MEAN), cov=np.array(GAUSS2D_COV))
        T = gaussian_ot_map(GaussianSpec(np.zeros(2), np.eye(2)), GaussianSpec(dst.mean, dst.cov))
        return Task(src, dst, T, float(np.trace(dst.cov)))
    if cfg.name == "eight_gauss":
        return Task(DistributionSpec("standard_normal", 2), DistributionSpec("eight_gaussians", 2))
    inst = benchmark if benchmark is not None else make_benchmark(cfg.dim, cfg.bench_seed)
    if inst.dim != cfg.dim:
        raise ValueError("benchmark instance dimension does not match the task")
    return Task(inst.source_spec(), inst.target_spec(), inst.T_star, inst.var_p1, inst)


# --- state ------------------------------------------------------------------


def _streams(seed: int):
    init, data, times, evals = np.random.SeedSequence(seed).spawn(4)
    torch_seed = int(init.generate_state(1, np.uint64)[0])
    return torch_seed, np.random.default_rng(data), np.random.default_rng(times), np.random.default_rng(evals)


@dataclass
class TrainState:
    model: PICNN
    optimizer: torch.optim.Adam
    data_rng: np.random.Generator
    time_rng: np.random.Generator
    iteration: int = 0
    wall_ms: float = 0.0
    metric_log: list[dict] = field(default_factory=list)
    loss_history: list[tuple[float, float, float]] = field(default_factory=list)


def init_state(config: TrainConfig, dim: int) -> TrainState:
    torch_seed, data_rng, time_rng, _ = _streams(config.seed)
    model = PICNN(config.model.picnn(dim), seed=torch_seed)
    opt = _make_optimizer(model, config)
    return TrainState(model, opt, data_rng, time_rng)


def _make_optimizer(model, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=config.lr, betas=(config.beta1, config.beta2), eps=config.adam_eps,
        foreach=False,
    )


def sample_pairs(rng: np.random.Generator, src: DistributionSpec, dst: DistributionSpec, batch_size: int, mode: str) -> PairBatch:
    z = sample(src, batch_size, rng)
    x = sample(dst, batch_size, rng)
    if mode == "emd":
        perm = emd_pairing(z, x).perm
    elif mode == "random":
        perm = np.arange(batch_size)
    else:
        raise ValueError(f"unknown pairing mode {mode!r}")
    return PairBatch(torch.as_tensor(z, dtype=DTYPE), torch.as_tensor(x[perm], dtype=DTYPE), perm)


def train_step(state: TrainState, batch: PairBatch, config: TrainConfig) -> dict:
    """One Adam update on ``L_FM + L_HJ``; returns the loss breakdown."""
    obj = config.objective
    n = batch.z.shape[0] * obj.samples_per_pair
    t = torch.as_tensor(sample_times(state.time_rng, n, obj), dtype=DTYPE)
    model = state.model
    state.optimizer.zero_grad(set_to_none=True)
    try:
        loss, parts = total_loss(model, batch, t, obj)
    except NumericOverflowError as exc:
        raise NonFiniteLossError(_diagnostic(state, t, str(exc))) from exc
    if not math.isfinite(parts["total"]):
        raise NonFiniteLossError(_diagnostic(state, t, f"loss terms {parts}"))
    loss.backward()
    if config.clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.clip)
    state.optimizer.step()
    for name, p in model.named_parameters():
        if not bool(torch.isfinite(p).all()):
            raise NonFiniteLossError(_diagnostic(state, t, f"parameter {name} became non-finite"))
    if not model.min_effective_wz() > 0:
        raise NonFiniteLossError(_diagnostic(state, t, "effective W_z lost positivity"))
    state.iteration += 1
    state.loss_history.append((parts["total"], parts["fm"], parts["hj"]))
    return parts


def _diagnostic(state: TrainState, t: torch.Tensor, what: str) -> str:
    return (
        f"iteration {state.iteration + 1}: {what}; t in [{float(t.min()):.4f}, {float(t.max()):.4f}], "
        f"last losses {state.loss_history[-3:]}"
    )


# --- evaluation -------------------------------------------------------------


@dataclass
class EvalSet:
    x0: np.ndarray
    x1: np.ndarray
    gap_x0: np.ndarray
    gap_x1: np.ndarray


def make_eval_set(config: TrainConfig, task: Task) -> EvalSet:
    """Held-out samples drawn once per run from their own substream."""
    rng = _streams(config.seed)[3]
    x0 = sample(task.source, config.eval_samples, rng)
    x1 = sample(task.target, config.eval_samples, rng)
    m = min(config.gap_samples, config.eval_samples)
    gx0 = x0[:m]
    if task.T_star is not None:
        gx1 = task.T_star(gx0)
    else:
        gx1 = x1[:m][emd_pairing(gx0, x1[:m]).perm]
    return EvalSet(x0, x1, gx0, gx1)


def evaluate(model: PICNN, task: Task, ev: EvalSet) -> dict:
    T = potential_map(model)
    out = {"l2_uvp": None, "cosine": None, "dual_gap": None, "w2": None}
    gen = T(ev.x0)
    if task.T_star is not None:
        out["l2_uvp"] = l2_uvp(lambda _: gen, task.T_star, ev.x0, task.var_p1)
        out["cosine"] = cosine_metric(lambda _: gen, task.T_star, ev.x0)[0]
    try:
        out["dual_gap"] = dual_gap_estimate(model, ev.gap_x0, ev.gap_x1)
    except ConvergenceError as exc:
        log.warning("dual gap skipped: %s", exc)
    out["w2"] = empirical_w2(gen, ev.x1)
    return out


# --- checkpoints ------------------------------------------------------------


@dataclass
class Checkpoint:
    config: TrainConfig
    dim: int
    params: dict[str, np.ndarray]
    adam: dict[str, np.ndarray]
    iteration: int
    wall_ms: float
    rng_state: dict
    metric_log: list[dict]
    loss_history: np.ndarray

    def to_bytes(self) -> bytes:
        meta = {
            "kind": "checkpoint",
            "config": self.config.to_dict(),
            "dim": self.dim,
            "iteration": self.iteration,
            "wall_ms": self.wall_ms,
            "rng_state": self.rng_state,
            "metric_log": self.metric_log,
        }
        arrays = {f"param/{k}": v for k, v in self.params.items()}
        arrays.update({f"adam/{k}": v for k, v in self.adam.items()})
        arrays["loss_history"] = np.asarray(self.loss_history, dtype=np.float64).reshape(-1, 3)
        return container.encode(meta, arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        meta, arrays = container.decode(data)
        if meta.get("kind") != "checkpoint":
            raise container.ContainerError("container does not hold a training checkpoint")
        params = {k[6:]: v for k, v in arrays.items() if k.startswith("param/")}
        adam = {k[5:]: v for k, v in arrays.items() if k.startswith("adam/")}
        return cls(
            TrainConfig(**meta["config"]), meta["dim"], params, adam, meta["iteration"],
            meta["wall_ms"], meta["rng_state"], meta["metric_log"], arrays["loss_history"],
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def model(self) -> PICNN:
        m = PICNN(self.config.model.picnn(self.dim))
        m.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in self.params.items()})
        return m


def make_checkpoint(state: TrainState, config: TrainConfig) -> Checkpoint:
    names = dict((id(p), n) for n, p in state.model.named_parameters())
    adam = {}
    for p, st in state.optimizer.state.items():
        n = names[id(p)]
        adam[f"exp_avg/{n}"] = st["exp_avg"].detach().numpy().copy()
        adam[f"exp_avg_sq/{n}"] = st["exp_avg_sq"].detach().numpy().copy()
        adam[f"step/{n}"] = np.array(float(st["step"]))
    return Checkpoint(
        config=config,
        dim=state.model.config.input_dim,
        params={k: v.detach().numpy().copy() for k, v in state.model.state_dict().items()},
        adam=adam,
        iteration=state.iteration,
        wall_ms=state.wall_ms,
        rng_state={
            "data": state.data_rng.bit_generator.state,
            "time": state.time_rng.bit_generator.state,
        },
        metric_log=[dict(r) for r in state.metric_log],
        loss_history=np.asarray(state.loss_history, dtype=np.float64).reshape(-1, 3),
    )


def restore_state(ckpt: Checkpoint, config: TrainConfig | None = None) -> TrainState:
    config = config or ckpt.config
    model = ckpt.model()
    opt = _make_optimizer(model, config)
    for n, p in model.named_parameters():
        if f"step/{n}" in ckpt.adam:
            opt.state[p] = {
                "step": torch.tensor(float(np.asarray(ckpt.adam[f"step/{n}"]).reshape(-1)[0])),
                "exp_avg": torch.as_tensor(ckpt.adam[f"exp_avg/{n}"], dtype=DTYPE).clone(),
                "exp_avg_sq": torch.as_tensor(ckpt.adam[f"exp_avg_sq/{n}"], dtype=DTYPE).clone(),
            }
    data_rng, time_rng = np.random.default_rng(), np.random.default_rng()
    data_rng.bit_generator.state = ckpt.rng_state["data"]
    time_rng.bit_generator.state = ckpt.rng_state["time"]
    return TrainState(
        model, opt, data_rng, time_rng, ckpt.iteration, ckpt.wall_ms,
        [dict(r) for r in ckpt.metric_log], [tuple(map(float, r)) for r in ckpt.loss_history],
    )


# --- loop -------------------------------------------------------------------


def train(
    config: TrainConfig,
    task: Task | None = None,
    resume: Checkpoint | None = None,
    checkpoint_path=None,
    on_eval: Callable[[dict], None] | None = None,
) -> Checkpoint:
    """Run ``config.iterations`` total steps (counting those already in ``resume``).

    An evaluation row is logged at iteration 0 (when training happens at all),
    every ``eval_every`` steps and at the end. On a numeric failure the last
    consistent state is written to ``checkpoint_path`` before re-raising.
    """
    task = task or build_task(config.task)
    state = restore_state(resume, config) if resume is not None else init_state(config, task.dim)
    ev = make_eval_set(config, task) if config.iterations > state.iteration else None

    def log_eval(parts):
        row = {c: None for c in METRIC_COLUMNS}
        row.update(iteration=state.iteration, wall_ms=round(state.wall_ms, 3))
        if parts is not None:
            row.update(loss_total=parts["total"], loss_fm=parts["fm"], loss_hj=parts["hj"])
        m = evaluate(state.model, task, ev)
        row.update(l2_uvp=m["l2_uvp"], dual_gap=m["dual_gap"], w2=m["w2"])
        state.metric_log.append(row)
        log.info("iter %d %s", state.iteration, {k: v for k, v in row.items() if v is not None})
        if on_eval is not None:
            on_eval(row)

    if ev is not None and state.iteration == 0:
        log_eval(None)
    parts = None
    try:
        while state.iteration < config.iterations:
            t0 = time.perf_counter()
            batch = sample_pairs(state.data_rng, task.source, task.target, config.batch_size, config.pairing)
            parts = train_step(state, batch, config)
            state.wall_ms += 1000.0 * (time.perf_counter() - t0)
            if state.iteration % config.eval_every == 0 or state.iteration == config.iterations:
                log_eval(parts)
                if checkpoint_path is not None:
                    make_checkpoint(state, config).save(checkpoint_path)
    except NumericOverflowError:
        if checkpoint_path is not None:
            # the failed step never reached the optimizer, so params are still the last good ones
            make_checkpoint(state, config).save(Path(checkpoint_path).with_suffix(".partial.cofm"))
        raise
    ckpt = make_checkpoint(state, config)
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return ckpt


def write_metrics_csv(path, metric_log: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in metric_log:
            w.writerow(["" if row.get(c) is None else repr(row[c]) for c in METRIC_COLUMNS])
    return path
