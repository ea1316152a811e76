"""Discrete and Gaussian optimal transport, conjugates and evaluation metrics.

Maps passed to the metrics are plain callables ``(N, d) ndarray -> (N, d) ndarray``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .diffcore import DTYPE, _check_spd, solve, spd_inv_sqrt, spd_sqrt
from .potential import Potential, time_column

MAX_ASSIGNMENT = 4096

ArrayMap = Callable[[np.ndarray], np.ndarray]


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, grad_norm: float):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm


@dataclass
class Assignment:
    perm: np.ndarray  # z[i] is matched with x[perm[i]]
    cost: float  # sum of |z_i - x_perm(i)|^2 / 2


def _np(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def emd_pairing(z, x) -> Assignment:
    """Exact minimum-cost matching under the cost ``|z_i - x_j|^2 / 2``."""
    z, x = _np(z), _np(x)
    if z.shape != x.shape or z.ndim != 2:
        raise ValueError(f"need two (B, d) arrays of equal shape, got {z.shape} and {x.shape}")
    if z.shape[0] > MAX_ASSIGNMENT:
        raise ValueError(f"batch of {z.shape[0]} exceeds the exact solver budget {MAX_ASSIGNMENT}")
    cost = 0.5 * cdist(z, x, "sqeuclidean")
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(z.shape[0], dtype=np.int64)
    perm[rows] = cols
    return Assignment(perm=perm, cost=float(cost[rows, cols].sum()))


def empirical_w2(a, b) -> float:
    """Plug-in ``W2^2 / 2``-cost: min over permutations of mean ``|a_i - b_s(i)|^2 / 2``."""
    a = _np(a)
    return emd_pairing(a, b).cost / a.shape[0]


# --- Gaussian closed forms --------------------------------------------------


@dataclass
class GaussianSpec:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = _check_spd(np.atleast_2d(np.asarray(self.cov, dtype=np.float64)))
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("mean and covariance dimensions disagree")

    @property
    def dim(self) -> int:
        return self.mean.size


@dataclass
class LinearMap:
    """``T(x) = dst_mean + A (x - src_mean)``."""

    matrix: np.ndarray
    src_mean: np.ndarray
    dst_mean: np.ndarray

    def __call__(self, x) -> np.ndarray:
        x = _np(x)
        return self.dst_mean + (x - self.src_mean) @ self.matrix.T

    @property
    def shift(self) -> np.ndarray:
        return self.dst_mean - self.matrix @ self.src_mean


def gaussian_ot_map(src: GaussianSpec, dst: GaussianSpec) -> LinearMap:
    s0h = spd_sqrt(src.cov)
    s0ih = spd_inv_sqrt(src.cov)
    mid = spd_sqrt(s0h @ dst.cov @ s0h)
    a = s0ih @ mid @ s0ih
    return LinearMap(0.5 * (a + a.T), src.mean.copy(), dst.mean.copy())


# --- metrics ----------------------------------------------------------------


def l2_uvp(T: ArrayMap, T_star: ArrayMap, samples, var_p1: float) -> float:
    """``100 * E|T - T*|^2 / Var(p1)`` in percent, Monte-Carlo over ``samples``."""
    if not var_p1 > 0:
        raise ValueError("Var(p1) must be positive")
    x = _np(samples)
    diff = T(x) - T_star(x)
    return float(100.0 * (diff * diff).sum(-1).mean() / var_p1)


def cosine_metric(T: ArrayMap, T_star: ArrayMap, samples, eps: float = 1e-12) -> tuple[float, int]:
    """Mean cosine between displacements ``T(x) - x`` and ``T*(x) - x``.

    Rows where either displacement is shorter than ``eps`` are skipped; the
    number skipped is returned alongside the mean.
    """
    x = _np(samples)
    u, v = T(x) - x, T_star(x) - x
    nu, nv = np.linalg.norm(u, axis=-1), np.linalg.norm(v, axis=-1)
    keep = (nu > eps) & (nv > eps)
    if not keep.any():
        raise ValueError("all displacements are degenerate")
    cos = (u[keep] * v[keep]).sum(-1) / (nu[keep] * nv[keep])
    return float(cos.mean()), int((~keep).sum())


def potential_map(potential: Potential, t: float = 0.0, chunk: int = 4096) -> ArrayMap:
    """``x -> grad Psi(t, x)`` as a numpy map."""

    def T(x):
        x = _np(x)
        out = []
        for i in range(0, x.shape[0], chunk):
            xb = torch.as_tensor(x[i : i + chunk], dtype=DTYPE)
            out.append(potential.gradient(t, xb, create_graph=False).numpy())
        return np.concatenate(out, axis=0) if out else np.zeros_like(x)

    return T


# --- conjugates and duality -------------------------------------------------


def _value_and_grad(potential, t, z):
    with torch.enable_grad():
        z = z.detach().requires_grad_(True)
        v = potential(t, z)
        (g,) = torch.autograd.grad(v.sum(), z)
    return v.detach(), g.detach()


def conjugate_eval(potential: Potential, t, y, iters: int = 500, tol: float = 1e-6, armijo: float = 1e-4):
    """Convex conjugate ``sup_z <y, z> - Psi(t, z)`` row-wise.

    Gradient ascent from ``z = y`` with Barzilai-Borwein trial steps and
    per-row Armijo backtracking. Returns
    ``(values, argmax)`` as tensors of shape ``(B,)`` and ``(B, d)``.
    """
    y = torch.as_tensor(_np(y), dtype=DTYPE)
    n = y.shape[0]
    t = time_column(t, n)
    z = y.clone()
    step = torch.ones(n, dtype=DTYPE)
    psi, g = _value_and_grad(potential, t, z)
    for _ in range(iters):
        asc = y - g
        gn2 = (asc * asc).sum(-1)
        active = gn2.sqrt() >= tol
        if not bool(active.any()):
            break
        obj = (y * z).sum(-1) - psi
        slack = 1e-14 * (1.0 + obj.abs())
        s = step.clone()
        for _ in range(60):
            z_try = z + s[:, None] * asc
            psi_try = potential(t, z_try).detach()
            obj_try = (y * z_try).sum(-1) - psi_try
            ok = (obj_try >= obj + armijo * s * gn2 - slack) | ~active
            if bool(ok.all()):
                break
            s = torch.where(ok, s, 0.5 * s)
        z_new = torch.where(active[:, None], z_try, z)
        psi, g_new = _value_and_grad(potential, t, z_new)
        # Barzilai-Borwein guess for the next trial step; Psi convex so dz.dg >= 0
        dz, dg = z_new - z, g_new - g
        curv = (dz * dg).sum(-1)
        bb = (dz * dz).sum(-1) / torch.where(curv > 0, curv, torch.ones_like(curv))
        bb = torch.where(curv > 0, bb, 2.0 * s)
        step = torch.where(active, bb.clamp(1e-8, 1e3), step)
        z, g = z_new, g_new
    gnorm = float((y - g).norm(dim=-1).max()) if n else 0.0
    if gnorm >= tol:
        raise ConvergenceError(f"conjugate ascent did not converge in {iters} iterations", gnorm)
    return (y * z).sum(-1) - psi, z


def dual_gap_estimate(potential: Potential, x0, x1, iters: int = 500) -> float:
    """Monte-Carlo mean of ``Psi(0, X0) + conj Psi(0, X1) - X0.X1`` (non-negative)."""
    x0 = torch.as_tensor(_np(x0), dtype=DTYPE)
    x1 = torch.as_tensor(_np(x1), dtype=DTYPE)
    with torch.no_grad():
        psi0 = potential(time_column(0.0, x0.shape[0]), x0)
    conj, _ = conjugate_eval(potential, 0.0, x1, iters=iters)
    return float((psi0 + conj - (x0 * x1).sum(-1)).mean())


def _gauss_legendre_panels(n: int, order: int = 8):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    panels = max(1, n // order)
    edges = np.linspace(0.0, 1.0, panels + 1)
    ts, ws = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        ts.append(0.5 * (hi - lo) * nodes + 0.5 * (hi + lo))
        ws.append(0.5 * (hi - lo) * weights)
    return np.concatenate(ts), np.concatenate(ws)


def theorem1_oracle(a, x0, x1, quadrature_n: int = 256) -> tuple[float, float]:
    """Both sides of the path-integral / duality identity for ``Psi(0, z) = z^T A z / 2``.

    ``lhs`` integrates the squared velocity residual along the bridge
    ``x_t = (1 - t) x0 + t x1`` for the HJ-consistent flow of that potential:
    the preimage ``z0(t)`` solves ``((1 - t) I + t A) z0 = x_t`` and the flow
    velocity at ``x_t`` is ``A z0 - z0``. ``rhs`` is twice the Fenchel-Young
    gap using the closed-form conjugate ``y^T A^{-1} y / 2``.
    """
    a = _check_spd(a)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    eye = np.eye(a.shape[0])
    ts, ws = _gauss_legendre_panels(quadrature_n)
    lhs = 0.0
    for t, w in zip(ts, ws):
        xt = (1.0 - t) * x0 + t * x1
        z0 = solve((1.0 - t) * eye + t * a, xt)
        r = (a @ z0 - z0) - (x1 - x0)
        lhs += w * float(r @ r)
    rhs = 2.0 * (0.5 * x0 @ a @ x0 + 0.5 * x1 @ solve(a, x1) - x0 @ x1)
    return float(lhs), float(rhs)
