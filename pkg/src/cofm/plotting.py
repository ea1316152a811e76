"""SVG figures for 2-D transport and training curves.

Output is byte-reproducible: fixed SVG hash salt, no date metadata, text kept
as paths.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "cofm",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

SOURCE_COLOR = "#9e9e9e"
TARGET_COLOR = "#7fb3d5"
GEN_COLOR = "#c0392b"
TRAJ_COLOR = "#2c3e50"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_transport_2d(path, source, target, runs: dict, n_traj: int = 5) -> Path:
    """One panel per step count ``N``.

    ``runs`` maps ``N -> (generated, trajectory)`` where ``trajectory`` is an
    ``(N + 1, B, 2)`` array or None. Markers: triangle = initial point,
    plus = intermediate Euler states, square = generated point.
    """
    source, target = np.asarray(source), np.asarray(target)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(runs), figsize=(3.0 * len(runs), 3.1), squeeze=False)
        lim = 1.1 * float(np.abs(np.concatenate([source, target])).max())
        for ax, (n, (gen, traj)) in zip(axes[0], sorted(runs.items())):
            gen = np.asarray(gen)
            ax.scatter(target[:, 0], target[:, 1], s=2, c=TARGET_COLOR, alpha=0.5, lw=0, label="target")
            ax.scatter(source[:, 0], source[:, 1], s=2, c=SOURCE_COLOR, alpha=0.5, lw=0, label="source")
            ax.scatter(gen[:, 0], gen[:, 1], s=2, c=GEN_COLOR, alpha=0.6, lw=0, label="generated")
            if traj is not None:
                traj = np.asarray(traj)
                for j in range(min(n_traj, traj.shape[1])):
                    path_j = traj[:, j]
                    ax.plot(path_j[:, 0], path_j[:, 1], c=TRAJ_COLOR, lw=0.8)
                    if len(path_j) > 2:
                        ax.scatter(path_j[1:-1, 0], path_j[1:-1, 1], marker="+", s=14, c=TRAJ_COLOR, lw=0.6)
                    ax.scatter(*path_j[0], marker="^", s=28, c=TRAJ_COLOR, zorder=3)
                    ax.scatter(*path_j[-1], marker="s", s=24, c=GEN_COLOR, edgecolors=TRAJ_COLOR, zorder=3)
            ax.set_title(f"N = {n}")
            ax.set_xlim(-lim, lim)
            ax.set_ylim(-lim, lim)
            ax.set_aspect("equal")
        axes[0][0].legend(loc="lower left", markerscale=4, frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def plot_metrics(path, metric_log: list[dict]) -> Path:
    """Loss terms and evaluation metrics against iteration (log scale)."""
    with plt.rc_context(STYLE):
        fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(7.5, 3.0))
        for key, label in (("loss_total", "total"), ("loss_fm", "FM"), ("loss_hj", "HJ")):
            pts = [(r["iteration"], r[key]) for r in metric_log if r.get(key) is not None and r[key] > 0]
            if pts:
                ax_l.plot(*zip(*pts), marker="o", ms=3, label=label)
        for key, label in (("l2_uvp", "L2-UVP (%)"), ("dual_gap", "dual gap"), ("w2", "empirical W2")):
            pts = [(r["iteration"], r[key]) for r in metric_log if r.get(key) is not None and r[key] > 0]
            if pts:
                ax_m.plot(*zip(*pts), marker="o", ms=3, label=label)
        for ax, title in ((ax_l, "training loss"), (ax_m, "evaluation")):
            ax.set_yscale("log")
            ax.set_xlabel("iteration")
            ax.set_title(title)
            if ax.lines:
                ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
