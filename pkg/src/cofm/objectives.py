"""Flow-matching loss, Hamilton-Jacobi consistency losses and their sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import DTYPE
from .potential import Potential, check_time_domain, time_column

HJ_VARIANTS = ("residual", "pushforward")
TIME_SAMPLING = ("uniform_truncated", "weight_proportional")


@dataclass
class ObjectiveConfig:
    hj: str = "residual"
    lam_exp: float = 2.0
    k: float = 4.0
    delta: float = 1e-2
    time_sampling: str = "uniform_truncated"
    samples_per_pair: int = 1
    hj_weight: float = 1.0

    def __post_init__(self):
        if self.hj not in HJ_VARIANTS:
            raise ValueError(f"hj must be one of {HJ_VARIANTS}, got {self.hj!r}")
        if self.time_sampling not in TIME_SAMPLING:
            raise ValueError(f"time_sampling must be one of {TIME_SAMPLING}, got {self.time_sampling!r}")
        if not 0.0 < self.delta <= 0.1:
            raise ValueError("delta must lie in (0, 0.1]")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.lam_exp < 0:
            raise ValueError("lam_exp must be non-negative")
        if self.samples_per_pair < 1:
            raise ValueError("samples_per_pair must be >= 1")
        if not self.hj_weight >= 0:
            raise ValueError("hj_weight must be non-negative")


@dataclass
class PairBatch:
    z: torch.Tensor
    x: torch.Tensor
    perm: np.ndarray | None = None

    def __post_init__(self):
        if self.z.shape != self.x.shape:
            raise ValueError(f"pair shapes differ: {tuple(self.z.shape)} vs {tuple(self.x.shape)}")
        if self.perm is not None:
            p = np.asarray(self.perm)
            if sorted(p.tolist()) != list(range(self.z.shape[0])):
                raise ValueError("pairing is not a permutation")


def sample_times(rng: np.random.Generator, n: int, config: ObjectiveConfig) -> np.ndarray:
    """Training times in ``[0, 1 - delta]``.

    ``uniform_truncated`` is uniform; ``weight_proportional`` has density
    proportional to ``(1 - t)^lam_exp`` (inverse-CDF draw).
    """
    u = rng.random(n)
    top = 1.0 - config.delta
    if config.time_sampling == "uniform_truncated":
        return u * top
    p = config.lam_exp + 1.0
    tail = config.delta**p
    return 1.0 - (1.0 - u * (1.0 - tail)) ** (1.0 / p)


def _interp(z, x, t):
    return (1.0 - t)[:, None] * z + t[:, None] * x


def fm_residual(potential: Potential, z, x, t, delta: float = 1e-2) -> torch.Tensor:
    """Per-row ``e_FM = (x - z) + (X_t - grad Psi(t, X_t)) / (1 - t)``."""
    t = time_column(t, z.shape[0])
    check_time_domain(t, delta)
    xt = _interp(z, x, t)
    g = potential.gradient(t, xt)
    return (x - z) + (xt - g) / (1.0 - t)[:, None]


def fm_loss(potential: Potential, z, x, t, delta: float = 1e-2) -> torch.Tensor:
    e = fm_residual(potential, z, x, t, delta)
    return (e * e).sum(-1).mean()


def hj_residual(potential: Potential, t, x, delta: float = 1e-2, create_graph: bool = True) -> torch.Tensor:
    """``R = d_t Psi + (|grad Psi|^2 / 2 - x.grad Psi + Psi) / (1 - t)``, per row."""
    t = time_column(t, x.shape[0])
    check_time_domain(t, delta)
    psi, dt, g = potential.partials(t, x, create_graph=create_graph)
    bracket = 0.5 * (g * g).sum(-1) - (x * g).sum(-1) + psi
    return dt + bracket / (1.0 - t)


def hj_res_loss(potential: Potential, z, x, t, lam_exp: float = 2.0, delta: float = 1e-2) -> torch.Tensor:
    """Mean of ``(1 - t)^lam_exp R(t, X_t)^2`` along the linear bridge."""
    t = time_column(t, z.shape[0])
    r = hj_residual(potential, t, _interp(z, x, t), delta)
    return ((1.0 - t) ** lam_exp * r * r).mean()


def pf_residual(potential: Potential, x0, t, delta: float = 1e-2) -> torch.Tensor:
    """``grad Psi(t, x0 + t v(0, x0)) - grad Psi(0, x0)``, per row."""
    t = time_column(t, x0.shape[0])
    check_time_domain(t, delta)
    g0 = potential.gradient(0.0, x0)
    # v(0, x0) = grad Psi(0, x0) - x0
    x_tilde = x0 + t[:, None] * (g0 - x0)
    return potential.gradient(t, x_tilde) - g0


def pf_loss(potential: Potential, x0, t, k: float = 4.0, delta: float = 1e-2) -> torch.Tensor:
    t = time_column(t, x0.shape[0])
    r = pf_residual(potential, x0, t, delta)
    return ((1.0 - t) ** k * (r * r).sum(-1)).mean()


def _weight_normaliser(config: ObjectiveConfig) -> float:
    # E_uniform[(1-t)^p] on [0, 1-delta]; restores the truncated-uniform scale
    # when (1-t)^p is moved from the integrand into the sampling density
    p = config.lam_exp + 1.0
    return (1.0 - config.delta**p) / (p * (1.0 - config.delta))


def total_loss(potential: Potential, batch: PairBatch, t, config: ObjectiveConfig):
    """``L_FM + hj_weight * L_HJ`` with the HJ term picked by ``config.hj``.

    Returns ``(loss, {"total", "fm", "hj"})`` where the dict holds floats.
    """
    z, x = batch.z, batch.x
    m = config.samples_per_pair
    if m > 1:
        z = z.repeat_interleave(m, dim=0)
        x = x.repeat_interleave(m, dim=0)
    t = time_column(t, z.shape[0])
    fm = fm_loss(potential, z, x, t, config.delta)
    if config.hj == "residual":
        if config.time_sampling == "weight_proportional":
            hj = _weight_normaliser(config) * hj_res_loss(potential, z, x, t, 0.0, config.delta)
        else:
            hj = hj_res_loss(potential, z, x, t, config.lam_exp, config.delta)
    else:
        hj = pf_loss(potential, z, t, config.k, config.delta)
    hj = config.hj_weight * hj
    loss = fm + hj
    return loss, {"total": float(loss.detach()), "fm": float(fm.detach()), "hj": float(hj.detach())}
