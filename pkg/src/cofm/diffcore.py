"""Differentiation and small dense linear-algebra helpers.

Everything here works in float64. Gradients are computed with torch's
reverse mode; ``create_graph=True`` keeps the returned input-gradient on the
tape so that losses built from it can be differentiated again with respect
to parameters.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg
import torch

DTYPE = torch.float64


class NumericOverflowError(FloatingPointError):
    """A tensor produced by a public operation contains inf or nan."""


class NotSPDError(ValueError):
    """Matrix is not symmetric positive definite."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericOverflowError(f"non-finite values in {what}")
    return t


def _input_leaf(x: torch.Tensor) -> torch.Tensor:
    # keep x attached when it already depends on something differentiable
    if x.requires_grad:
        return x
    return x.detach().requires_grad_(True)


def _check_scalar_field(out: torch.Tensor, x: torch.Tensor) -> None:
    rows = x.shape[0] if x.dim() == 2 else None
    if out.dim() == 0 and x.dim() == 1:
        return
    if out.dim() == 1 and rows is not None and out.shape[0] == rows:
        return
    raise ValueError(
        f"scalar field must return one value per input row, got shape {tuple(out.shape)} "
        f"for input {tuple(x.shape)}"
    )


def grad_input(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    create_graph: bool = True,
) -> torch.Tensor:
    """Gradient of a row-wise scalar field ``f`` at ``x``.

    ``x`` is either a single point of shape ``(d,)`` or a batch ``(B, d)``;
    ``f`` must return a scalar or one scalar per row. With ``create_graph`` the
    result can be used inside a loss and differentiated again.
    """
    x = _input_leaf(x)
    with torch.enable_grad():
        out = f(x)
        _check_scalar_field(out, x)
        check_finite(out, "scalar field output")
        (g,) = torch.autograd.grad(out.sum(), x, create_graph=create_graph)
    return check_finite(g, "input gradient")


def grad_time_input(
    f: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    t: torch.Tensor,
    x: torch.Tensor,
    create_graph: bool = True,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Value, per-row time derivative and spatial gradient of ``f(t, x)``.

    ``t`` has shape ``(B,)`` and ``x`` shape ``(B, d)``.
    """
    t = _input_leaf(t)
    x = _input_leaf(x)
    with torch.enable_grad():
        out = f(t, x)
        _check_scalar_field(out, x)
        check_finite(out, "scalar field output")
        dt, dx = torch.autograd.grad(out.sum(), (t, x), create_graph=create_graph)
    check_finite(dt, "time derivative")
    check_finite(dx, "input gradient")
    return out, dt, dx


def grad_params(
    loss: torch.Tensor, params: Iterable[torch.Tensor], retain_graph: bool = False
) -> list[torch.Tensor]:
    """Reverse-mode gradient of a scalar loss with respect to ``params``.

    Second-order paths through :func:`grad_input` results are included.
    Parameters the loss does not depend on get zero gradients.
    """
    params = list(params)
    if loss.dim() != 0:
        raise ValueError("loss must be a scalar")
    check_finite(loss, "loss")
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]


def flat_params(params: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.cat([p.detach().reshape(-1) for p in params])


# --- dense SPD kit (numpy) ------------------------------------------------


def _check_spd(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NotSPDError(f"expected a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.abs(a).max()))
    if not np.allclose(a, a.T, rtol=0, atol=1e-12 * scale):
        raise NotSPDError("matrix is not symmetric")
    try:
        np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotSPDError("matrix is not positive definite") from exc
    return a


def spd_sqrt(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric positive definite matrix."""
    a = _check_spd(a)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    r = (v * np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def spd_inv_sqrt(a: np.ndarray) -> np.ndarray:
    a = _check_spd(a)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    r = (v / np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T)


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a^{-1} b`` for SPD ``a`` via Cholesky."""
    a = _check_spd(a)
    return scipy.linalg.cho_solve(scipy.linalg.cho_factor(a), np.asarray(b, dtype=np.float64))
