"""Time-dependent convex potentials ``Psi(t, x)`` and the quantities derived from them."""

from __future__ import annotations

import torch
from torch import nn

from .diffcore import DTYPE, grad_input, grad_time_input

DELTA_EVAL = 1e-2


class DomainError(ValueError):
    """A time query falls into the excluded neighbourhood of t = 1."""


def time_column(t, n: int) -> torch.Tensor:
    """Broadcast a scalar or ``(n,)`` time argument to a ``(n,)`` tensor."""
    t = torch.as_tensor(t, dtype=DTYPE)
    if t.dim() == 0:
        return t.expand(n)
    if t.shape != (n,):
        raise ValueError(f"time vector of shape {tuple(t.shape)} does not match {n} rows")
    return t


def check_time_domain(t: torch.Tensor, delta: float = DELTA_EVAL) -> None:
    t = t.detach()
    if t.numel() and (float(t.min()) < 0.0 or float(t.max()) > 1.0 - delta + 1e-12):
        raise DomainError(
            f"times must lie in [0, {1.0 - delta:g}], got range "
            f"[{float(t.min()):.6g}, {float(t.max()):.6g}]"
        )


class Potential(nn.Module):
    """Base class: subclasses implement ``forward(t, x) -> Psi`` with ``t`` of
    shape ``(B,)`` and ``x`` of shape ``(B, d)``, returning ``(B,)``.

    ``Psi(t, .)`` is expected to be convex with ``Psi(1, x) = |x|^2 / 2``.
    """

    delta_eval: float = DELTA_EVAL

    def psi(self, t, x: torch.Tensor) -> torch.Tensor:
        return self(time_column(t, x.shape[0]), x)

    def gradient(self, t, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
        tc = time_column(t, x.shape[0])
        return grad_input(lambda y: self(tc, y), x, create_graph=create_graph)

    def partials(self, t, x: torch.Tensor, create_graph: bool = True):
        """``(Psi, dPsi/dt, grad_x Psi)`` at ``(t, x)``."""
        tc = time_column(t, x.shape[0]).clone()
        return grad_time_input(self, tc, x, create_graph=create_graph)

    def psi_small(self, t, x: torch.Tensor) -> torch.Tensor:
        """Unscaled potential ``(Psi - |x|^2/2) / (1 - t)``."""
        tc = time_column(t, x.shape[0])
        check_time_domain(tc, self.delta_eval)
        return (self(tc, x) - 0.5 * (x * x).sum(-1)) / (1.0 - tc)

    def velocity(self, t, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
        tc = time_column(t, x.shape[0])
        check_time_domain(tc, self.delta_eval)
        g = self.gradient(tc, x, create_graph=create_graph)
        return (g - x) / (1.0 - tc)[:, None]
