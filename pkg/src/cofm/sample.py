"""One-step and multi-step generation from a trained potential."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import DTYPE, NumericOverflowError
from .potential import DELTA_EVAL, Potential


@dataclass
class SamplerConfig:
    steps: int = 1
    record_trajectory: bool = False

    def __post_init__(self):
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError("steps must be an integer >= 1")
        self.steps = int(self.steps)


def _tensor(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=DTYPE)


def one_step(potential: Potential, x0) -> torch.Tensor:
    """Brenier-style map ``x1 = grad Psi(0, x0)``."""
    return potential.gradient(0.0, _tensor(x0), create_graph=False)


def ode_sample(potential: Potential, x0, config: SamplerConfig | int = 1):
    """Explicit Euler on ``dx/dt = v(t, x)`` over the grid ``t_k = k / N``.

    The step is written as ``x + w (grad Psi(t_k, x) - x)`` with
    ``w = h / (1 - t_k)``, which is the Euler update for
    ``v = (grad Psi - x) / (1 - t)``; the last node gives ``w = 1`` exactly,
    so ``N = 1`` reproduces :func:`one_step` bit for bit. For ``N > 100`` the
    velocity node is clamped to ``1 - delta``.

    Returns ``(x1, trajectory)`` where ``trajectory`` is ``(N + 1, B, d)`` or None.
    """
    if not isinstance(config, SamplerConfig):
        config = SamplerConfig(steps=config)
    n = config.steps
    x = _tensor(x0)
    traj = [x] if config.record_trajectory else None
    top = 1.0 - potential.delta_eval
    for k in range(n):
        t = k / n
        if t > top:
            w = (1.0 / n) / (1.0 - top)
            t = top
        else:
            w = 1.0 / (n - k)
        try:
            g = potential.gradient(t, x, create_graph=False)
        except NumericOverflowError as exc:
            raise NumericOverflowError(f"Euler step {k + 1} of {n}: {exc}") from exc
        x = g if w == 1.0 else x + w * (g - x)
        if not bool(torch.isfinite(x).all()):
            raise NumericOverflowError(f"non-finite state after Euler step {k + 1} of {n}")
        if traj is not None:
            traj.append(x)
    return x, (torch.stack(traj) if traj is not None else None)


def straightness(trajectory: torch.Tensor) -> torch.Tensor:
    """Per-sample ``max_k dist(x_k, segment(x_0, x_N))`` for a ``(N + 1, B, d)`` trajectory."""
    a, b = trajectory[0], trajectory[-1]
    ab = b - a
    denom = (ab * ab).sum(-1).clamp_min(1e-300)
    s = (((trajectory - a) * ab).sum(-1) / denom).clamp(0.0, 1.0)
    proj = a + s[..., None] * ab
    return (trajectory - proj).norm(dim=-1).max(dim=0).values
