"""``cofm`` command line.

Subcommands: train, sample, plot2d, eval-bench, make-bench, oracle. Every
run writes ``manifest.json`` into its output directory listing the resolved
config hash, seed and a sha256 for each artifact.

Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 oracle failure.
Failures print one JSON object to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .bench import BenchmarkInstance, DistributionSpec, linear_baseline, make_benchmark, sample as draw
from .config import ConfigError, config_hash, describe_defaults, parse_config, serialize_config
from .container import ContainerError
from .diffcore import NumericOverflowError
from .plotting import plot_metrics, plot_transport_2d
from .sample import SamplerConfig, ode_sample
from .suites import SUITES, format_table, run_suites
from .train import PAIRING_MODES, PRESETS, Checkpoint, TrainConfig, build_task, preset, train, write_metrics_csv
from .transport import ConvergenceError, cosine_metric, dual_gap_estimate, empirical_w2, l2_uvp, potential_map

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 2, 3, 4
DEFAULT_PLOT_STEPS = (1, 2, 10, 100)

log = logging.getLogger("cofm")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG, **extra):
        super().__init__(message)
        self.code = code
        self.extra = extra


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(f"{self.prog}: {message}")


# --- helpers ----------------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, args, cfg_hash: str, seed, artifacts, inputs=()) -> Path:
    """Record enough to reproduce the run: config hash, seed and artifact hashes."""
    entries = [{"path": p.name, "sha256": _sha256(p), "bytes": p.stat().st_size} for p in artifacts]
    manifest = {
        "command": command,
        "argv": list(args),
        "config_path": None,
        "config_hash": cfg_hash,
        "seed": seed,
        "out_dir": str(out),
        "artifacts": entries,
        "inputs": [{"path": str(p), "sha256": _sha256(Path(p))} for p in inputs],
        "version": __version__,
    }
    if "--config" in args:
        manifest["config_path"] = args[list(args).index("--config") + 1]
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(path) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "checkpoint.cofm"
    if not p.is_file():
        raise CliError(f"checkpoint not found: {p}")
    return p


def _write_points(path: Path, points: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(points.shape[1])])
        w.writerows([repr(float(v)) for v in row] for row in points)
    return path


def _write_trajectory(path: Path, traj: np.ndarray) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "index"] + [f"x{i}" for i in range(traj.shape[2])])
        for k in range(traj.shape[0]):
            for j in range(traj.shape[1]):
                w.writerow([k, j] + [repr(float(v)) for v in traj[k, j]])
    return path


def _apply_threads():
    raw = os.environ.get("COFM_THREADS")
    if raw is None or raw == "":
        return
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError(f"COFM_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


# --- subcommands ------------------------------------------------------------


def resolve_train_config(args) -> TrainConfig:
    cfg = preset(args.preset) if args.preset else TrainConfig()
    if args.config:
        cfg = parse_config(args.config, "train", base=cfg)
    d = cfg.to_dict()
    for flag, key in (("seed", "seed"), ("pairing", "pairing"), ("iterations", "iterations")):
        v = getattr(args, flag)
        if v is not None:
            d[key] = v
    if args.hj is not None:
        d["objective"]["hj"] = args.hj
    if args.dim is not None:
        d["task"]["dim"] = args.dim
    return TrainConfig(**d)


def cmd_train(args, argv) -> int:
    out = _outdir(args.out)
    cfg = resolve_train_config(args)
    benchmark = BenchmarkInstance.load(args.bench) if args.bench else None
    resume = Checkpoint.load(_checkpoint_path(args.resume)) if args.resume else None
    task = build_task(cfg.task, benchmark)
    (out / "config.txt").write_text(serialize_config(cfg))
    ckpt_path = out / "checkpoint.cofm"
    ckpt = train(cfg, task, resume=resume, checkpoint_path=ckpt_path)
    csv_path = write_metrics_csv(out / "metrics.csv", ckpt.metric_log)
    svg_path = plot_metrics(out / "metrics.svg", ckpt.metric_log)
    inputs = [p for p in (args.bench, args.resume and _checkpoint_path(args.resume)) if p]
    write_manifest(out, "train", argv, config_hash(cfg), cfg.seed,
                   [ckpt_path, csv_path, svg_path, out / "config.txt"], inputs)
    final = ckpt.metric_log[-1] if ckpt.metric_log else {}
    print(json.dumps({"checkpoint": str(ckpt_path), "iteration": ckpt.iteration, **final}))
    return EXIT_OK


def _load_model(path):
    ckpt = Checkpoint.load(_checkpoint_path(path))
    return ckpt, ckpt.model()


def _source(ckpt: Checkpoint) -> DistributionSpec:
    return DistributionSpec("standard_normal", ckpt.dim)


def _target_samples(ckpt: Checkpoint, n: int, rng, bench_path=None) -> np.ndarray:
    benchmark = BenchmarkInstance.load(bench_path) if bench_path else None
    return draw(build_task(ckpt.config.task, benchmark).target, n, rng)


def cmd_sample(args, argv) -> int:
    out = _outdir(args.out)
    scfg = parse_config(args.config, "sample") if args.config else SamplerConfig()
    if args.steps is not None:
        scfg = SamplerConfig(steps=args.steps, record_trajectory=scfg.record_trajectory)
    if args.trajectory:
        scfg = SamplerConfig(steps=scfg.steps, record_trajectory=True)
    ckpt, model = _load_model(args.checkpoint)
    rng = np.random.default_rng(args.seed)
    x0 = draw(_source(ckpt), args.n, rng)
    x1, traj = ode_sample(model, x0, scfg)
    x1 = x1.detach().numpy()
    artifacts = [_write_points(out / "samples.csv", x1)]
    if traj is not None:
        traj = traj.detach().numpy()
        artifacts.append(_write_trajectory(out / "trajectory.csv", traj))
    if ckpt.dim == 2:
        target = _target_samples(ckpt, args.n, rng, args.bench)
        artifacts.append(plot_transport_2d(out / "samples.svg", x0, target, {scfg.steps: (x1, traj)}))
    h = _json_hash({"sampler": serialize_config(scfg), "n": args.n, "checkpoint": _sha256(_checkpoint_path(args.checkpoint))})
    write_manifest(out, "sample", argv, h, args.seed, artifacts, [_checkpoint_path(args.checkpoint)])
    print(json.dumps({"samples": str(artifacts[0]), "n": args.n, "steps": scfg.steps}))
    return EXIT_OK


def _parse_steps(raw: str) -> list[int]:
    try:
        steps = sorted({int(s) for s in raw.split(",") if s.strip()})
    except ValueError:
        raise CliError(f"--steps expects a comma-separated list of integers, got {raw!r}") from None
    if not steps or steps[0] < 1:
        raise CliError("--steps values must be >= 1")
    return steps


def cmd_plot2d(args, argv) -> int:
    out = _outdir(args.out)
    steps = _parse_steps(args.steps)
    ckpt, model = _load_model(args.checkpoint)
    if ckpt.dim != 2:
        raise CliError(f"plot2d needs a two-dimensional model, checkpoint has d={ckpt.dim}")
    rng = np.random.default_rng(args.seed)
    x0 = draw(_source(ckpt), args.n, rng)
    target = _target_samples(ckpt, args.n, rng, args.bench)
    runs = {}
    for n in steps:
        x1, traj = ode_sample(model, x0, SamplerConfig(steps=n, record_trajectory=True))
        runs[n] = (x1.detach().numpy(), traj.detach().numpy())
    svg = plot_transport_2d(out / "transport.svg", x0, target, runs)
    w2 = {str(n): empirical_w2(runs[n][0], target) for n in steps} if args.n <= 4096 else {}
    h = _json_hash({"steps": steps, "n": args.n, "checkpoint": _sha256(_checkpoint_path(args.checkpoint))})
    write_manifest(out, "plot2d", argv, h, args.seed, [svg], [_checkpoint_path(args.checkpoint)])
    print(json.dumps({"figure": str(svg), "w2": w2}))
    return EXIT_OK


def evaluation_report(ckpt: Checkpoint, model, n: int, seed: int, benchmark=None, gap_samples: int = 256) -> dict:
    """OT-quality metrics of a trained model against its task's ground truth."""
    task = build_task(ckpt.config.task, benchmark)
    rng = np.random.default_rng(seed)
    x0 = draw(task.source, n, rng)
    x1 = draw(task.target, n, rng)
    gen = potential_map(model)(x0)
    report = {
        "task": ckpt.config.task.name, "dim": ckpt.dim, "iteration": ckpt.iteration, "n": n,
        "l2_uvp": None, "cosine": None, "cosine_skipped": None, "dual_gap": None,
        "w2": empirical_w2(gen[:4096], x1[:4096]), "linear_baseline_l2_uvp": None,
    }
    if task.T_star is not None:
        ref = task.T_star(x0)
        report["l2_uvp"] = l2_uvp(lambda _: gen, lambda _: ref, x0, task.var_p1)
        report["cosine"], report["cosine_skipped"] = cosine_metric(lambda _: gen, lambda _: ref, x0)
        base = linear_baseline(x0, x1)
        report["linear_baseline_l2_uvp"] = l2_uvp(base, lambda _: ref, x0, task.var_p1)
        m = min(gap_samples, n)
        gap_x0, gap_x1 = x0[:m], ref[:m]
        try:
            report["dual_gap"] = dual_gap_estimate(model, gap_x0, gap_x1)
        except ConvergenceError as exc:
            log.warning("dual gap skipped: %s", exc)
    return report


def cmd_eval_bench(args, argv) -> int:
    out = _outdir(args.out)
    ckpt, model = _load_model(args.checkpoint)
    benchmark = BenchmarkInstance.load(args.bench) if args.bench else None
    report = evaluation_report(ckpt, model, args.n, args.seed, benchmark)
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    inputs = [_checkpoint_path(args.checkpoint)] + ([Path(args.bench)] if args.bench else [])
    h = _json_hash({"n": args.n, "inputs": [_sha256(p) for p in inputs]})
    write_manifest(out, "eval-bench", argv, h, args.seed, [path], inputs)
    print(json.dumps(report))
    return EXIT_OK


def cmd_make_bench(args, argv) -> int:
    out = _outdir(args.out)
    bcfg = parse_config(args.config, "bench") if args.config else None
    dim = args.dim if args.dim is not None else (bcfg.dim if bcfg else 16)
    seed = args.seed if args.seed is not None else (bcfg.seed if bcfg else 0)
    inst = make_benchmark(dim, seed)
    path = inst.save(out / f"bench_d{dim}_s{seed}.cofm")
    write_manifest(out, "make-bench", argv, _json_hash({"dim": dim, "seed": seed}), seed, [Path(path)])
    print(json.dumps({"instance": str(path), "dim": dim, "seed": seed, "var_p1": inst.var_p1}))
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    results = run_suites(args.suite)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if args.out:
        out = _outdir(args.out)
        path = out / "oracle.json"
        rows = [{"suite": r.suite, "check": r.name, "value": r.value, "tol": r.tol, "passed": r.passed} for r in results]
        path.write_text(json.dumps(rows, indent=2) + "\n")
        write_manifest(out, "oracle", argv, _json_hash({"suite": sorted(args.suite)}), None, [path])
    if failed:
        raise CliError(f"{len(failed)} oracle check(s) failed", EXIT_ORACLE,
                       failed=[f"{r.suite}: {r.name}" for r in failed])
    return EXIT_OK


# --- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="cofm", description=__doc__, formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser(
        "train", help="train a model; writes checkpoint.cofm, metrics.csv, metrics.svg",
        formatter_class=fmt,
        epilog="Config keys and their defaults (a preset overrides some of these):\n"
        + describe_defaults("train") + f"\n\nPresets: {', '.join(PRESETS)}",
    )
    t.add_argument("--preset", choices=PRESETS, help="start from a named recipe")
    t.add_argument("--config", help="key = value config file, applied on top of the preset")
    t.add_argument("--seed", type=int, help="training seed (config key: seed)")
    t.add_argument("--pairing", choices=PAIRING_MODES, help="minibatch pairing (config key: pairing)")
    t.add_argument("--hj", choices=("residual", "pushforward"), help="consistency loss (config key: objective.hj)")
    t.add_argument("--dim", type=int, help="task dimension, benchmark tasks only (config key: task.dim)")
    t.add_argument("--iterations", type=int, help="total optimizer steps (config key: iterations)")
    t.add_argument("--bench", help="benchmark instance file to train against instead of regenerating it")
    t.add_argument("--resume", help="checkpoint (file or run directory) to continue from")
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser(
        "sample", help="push source samples through the learned flow; writes samples.csv",
        formatter_class=fmt,
        epilog="Sampler config keys and their defaults:\n" + describe_defaults("sample"),
    )
    s.add_argument("--checkpoint", required=True, help="checkpoint file or train output directory")
    s.add_argument("--config", help="sampler config file")
    s.add_argument("--steps", type=int, help="Euler steps N; 1 is the one-step map (default 1)")
    s.add_argument("--n", type=int, default=1000, help="number of samples (default 1000)")
    s.add_argument("--seed", type=int, default=0, help="seed for the source draw (default 0)")
    s.add_argument("--trajectory", action="store_true", help="also write trajectory.csv")
    s.add_argument("--bench", help="benchmark instance for the target cloud in the d=2 figure")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_sample)

    q = sub.add_parser("plot2d", help="render source/target/generated clouds for several step counts (SVG)")
    q.add_argument("--checkpoint", required=True, help="checkpoint file or train output directory")
    q.add_argument("--steps", default=",".join(map(str, DEFAULT_PLOT_STEPS)), help="comma-separated step counts (default 1,2,10,100)")
    q.add_argument("--n", type=int, default=1000, help="points per cloud (default 1000)")
    q.add_argument("--seed", type=int, default=0, help="seed for the point clouds (default 0)")
    q.add_argument("--bench", help="benchmark instance file for bench tasks")
    q.add_argument("--out", required=True, help="output directory")
    q.set_defaults(func=cmd_plot2d)

    e = sub.add_parser("eval-bench", help="write report.json with l2_uvp, cosine, dual_gap, w2 and the linear baseline")
    e.add_argument("--checkpoint", required=True, help="checkpoint file or train output directory")
    e.add_argument("--bench", help="benchmark instance file (default: regenerate from the checkpoint's task)")
    e.add_argument("--n", type=int, default=4096, help="evaluation samples (default 4096)")
    e.add_argument("--seed", type=int, default=12345, help="evaluation seed (default 12345)")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval_bench)

    m = sub.add_parser(
        "make-bench", help="generate a synthetic ICNN benchmark instance file",
        formatter_class=fmt, epilog="Bench config keys and their defaults:\n" + describe_defaults("bench"),
    )
    m.add_argument("--dim", type=int, help="dimension (default 16)")
    m.add_argument("--seed", type=int, help="instance seed (default 0)")
    m.add_argument("--config", help="bench config file")
    m.add_argument("--out", required=True, help="output directory")
    m.set_defaults(func=cmd_make_bench)

    o = sub.add_parser("oracle", help="run analytic self-checks and print a pass/fail table")
    o.add_argument("--suite", action="append", choices=list(SUITES) + ["all"],
                   help="suite to run, repeatable (default all)")
    o.add_argument("--out", help="optional output directory for oracle.json")
    o.set_defaults(func=cmd_oracle)
    return p


def _fail(code: int, kind: str, message: str, **extra) -> int:
    payload = {"error": kind, "message": message, "exit_code": code, **extra}
    print(json.dumps(payload, default=str), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "suite", None) is None and args.command == "oracle":
            args.suite = ["all"]
        _apply_threads()
        return args.func(args, argv)
    except CliError as exc:
        return _fail(exc.code, "oracle_failure" if exc.code == EXIT_ORACLE else "usage_error", str(exc), **exc.extra)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc), key=exc.key, line=exc.line)
    except (NumericOverflowError, ConvergenceError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", str(exc))
    except (ContainerError, FileNotFoundError, ValueError) as exc:
        return _fail(EXIT_CONFIG, "config_error", str(exc))


if __name__ == "__main__":
    sys.exit(main())
