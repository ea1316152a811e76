"""Closed-form potentials with known Hamilton-Jacobi behaviour.

All of them are written as ``Psi(t, x) = |x|^2/2 + (1 - t) psi(t, x)`` so
they satisfy the terminal anchor exactly. The linear and quadratic ones solve
``d_t psi + |grad psi|^2 / 2 = 0``.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .diffcore import DTYPE
from .potential import Potential, time_column


def _half_sq(x: torch.Tensor) -> torch.Tensor:
    return 0.5 * (x * x).sum(-1)


class IdentityPotential(Potential):
    """``Psi = |x|^2 / 2`` for every t: zero velocity."""

    def forward(self, t, x):
        return _half_sq(x) + 0.0 * time_column(t, x.shape[0])


class ConstantPsiPotential(Potential):
    """``psi(t, x) = c``."""

    def __init__(self, c: float = 1.0):
        super().__init__()
        self.c = nn.Parameter(torch.tensor(float(c), dtype=DTYPE))

    def forward(self, t, x):
        t = time_column(t, x.shape[0])
        return _half_sq(x) + (1.0 - t) * self.c


class LinearHJPotential(Potential):
    """``psi(t, x) = b.x - t |b|^2 / 2``: constant velocity ``b``."""

    def __init__(self, b):
        super().__init__()
        self.b = nn.Parameter(torch.as_tensor(b, dtype=DTYPE).clone())

    def forward(self, t, x):
        t = time_column(t, x.shape[0])
        psi = x @ self.b - 0.5 * t * (self.b @ self.b)
        return _half_sq(x) + (1.0 - t) * psi


class DriftOnlyPotential(Potential):
    """``psi(t, x) = b.x`` (the time term of the linear solution dropped).

    Its HJ residual is ``R = (1 - t) |b|^2 / 2``.
    """

    def __init__(self, b):
        super().__init__()
        self.b = nn.Parameter(torch.as_tensor(b, dtype=DTYPE).clone())

    def forward(self, t, x):
        t = time_column(t, x.shape[0])
        return _half_sq(x) + (1.0 - t) * (x @ self.b)


class QuadraticHJPotential(Potential):
    """``psi(t, x) = c |x|^2 / (2 (1 + c t))``, velocity ``c x / (1 + c t)``; needs ``c > -1``."""

    def __init__(self, c: float = 1.0):
        super().__init__()
        if c <= -1.0:
            raise ValueError("c must exceed -1")
        self.c = nn.Parameter(torch.tensor(float(c), dtype=DTYPE))

    def forward(self, t, x):
        t = time_column(t, x.shape[0])
        psi = self.c * (x * x).sum(-1) / (2.0 * (1.0 + self.c * t))
        return _half_sq(x) + (1.0 - t) * psi


class QuadraticFormPotential(Potential):
    """Time-independent ``Psi(t, z) = z^T A z / 2``, used for conjugate checks only."""

    def __init__(self, a):
        super().__init__()
        self.register_buffer("a", torch.as_tensor(np.asarray(a), dtype=DTYPE))

    def forward(self, t, x):
        return 0.5 * ((x @ self.a) * x).sum(-1) + 0.0 * time_column(t, x.shape[0])


class QuadraticFlowPotential(Potential):
    """HJ-consistent ``Psi(t, x) = x^T A M(t)^-1 x / 2`` with ``M(t) = (1 - t) I + t A``.

    ``grad Psi(0, .) = A``: the displacement flow of the Brenier map ``x -> A x``.
    """

    def __init__(self, a):
        super().__init__()
        self.register_buffer("a", torch.as_tensor(np.asarray(a), dtype=DTYPE))

    def forward(self, t, x):
        t = time_column(t, x.shape[0])
        eye = torch.eye(x.shape[1], dtype=DTYPE)
        m = (1 - t)[:, None, None] * eye + t[:, None, None] * self.a
        y = torch.linalg.solve(m, x[..., None])[..., 0]
        return 0.5 * ((y @ self.a) * x).sum(-1)
