"""Time-dependent partially input-convex network with the convexity embedding layer."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import DTYPE
from .potential import Potential, time_column

ACTNORM_FLOOR = 1e-4


def softplus_inv(y: float) -> float:
    return y + math.log(-math.expm1(-y))


@dataclass
class PicnnConfig:
    input_dim: int
    hidden: tuple[int, ...] = (128, 128, 128)
    time_hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.time_hidden = tuple(int(h) for h in self.time_hidden)
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if len(self.hidden) < 1 or min(self.hidden) < 1 or min(self.time_hidden, default=1) < 1:
            raise ValueError("need at least one hidden layer (L >= 2) and positive widths")

    @property
    def num_layers(self) -> int:
        return len(self.hidden) + 1

    @property
    def widths(self) -> tuple[int, ...]:
        return self.hidden + (1,)


def _uniform(shape, fan_in: int, gen: torch.Generator) -> torch.Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2 - 1) * bound


class TimeMLP(nn.Module):
    """Small smooth MLP of the scalar time."""

    def __init__(self, hidden: tuple[int, ...], out_dim: int, gen: torch.Generator):
        super().__init__()
        sizes = (1,) + tuple(hidden) + (out_dim,)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(nn.Parameter(_uniform((fan_out, fan_in), fan_in, gen)))
            self.biases.append(nn.Parameter(_uniform((fan_out,), fan_in, gen)))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        h = t[:, None]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = F.linear(h, w, b)
            if i < last:
                h = F.softplus(h)
        return h

    def zero_(self):
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self


class PICNN(Potential):
    """``Psi(t, x) = (1 - t) z_L(t, x) + alpha(t) |x|^2`` with ``z_L`` convex in x.

    Layer ``l`` computes ``W_x x + softplus(Wz_raw) z_{l-1} + b + S_l(t)``;
    hidden layers are followed by a positive-scale ActNorm and softplus, the
    last layer is linear. ``alpha(t) = sigmoid(r(t) (1 - t))``.
    """

    def __init__(self, config: PicnnConfig, seed: int = 0, generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        gen = generator if generator is not None else torch.Generator().manual_seed(seed)
        d = config.input_dim
        widths = config.widths
        self.wx = nn.ParameterList()
        self.wz_raw = nn.ParameterList()
        self.bias = nn.ParameterList()
        self.time_bias = nn.ModuleList()
        self.an_scale_raw = nn.ParameterList()
        self.an_bias = nn.ParameterList()
        prev = None
        for l, width in enumerate(widths):
            self.wx.append(nn.Parameter(_uniform((width, d), d, gen)))
            self.bias.append(nn.Parameter(torch.zeros(width, dtype=DTYPE)))
            if prev is not None:
                # effective W_z ~ 0.5 / fan_in, jittered in raw space
                base = softplus_inv(0.5 / prev)
                jitter = 0.1 * (torch.rand((width, prev), generator=gen, dtype=DTYPE) * 2 - 1)
                self.wz_raw.append(nn.Parameter(base + jitter))
            self.time_bias.append(TimeMLP(config.time_hidden, width, gen))
            if l < len(widths) - 1:
                self.an_scale_raw.append(
                    nn.Parameter(torch.full((width,), softplus_inv(1.0 - ACTNORM_FLOOR), dtype=DTYPE))
                )
                self.an_bias.append(nn.Parameter(torch.zeros(width, dtype=DTYPE)))
            prev = width
        self.r_mlp = TimeMLP(config.time_hidden, 1, gen)

    # -- pieces ------------------------------------------------------------

    def wz(self, l: int) -> torch.Tensor:
        """Effective non-negative weight feeding ``z_{l-1}`` into layer ``l`` (1-based l >= 2)."""
        return F.softplus(self.wz_raw[l - 2])

    def actnorm_scale(self, l: int) -> torch.Tensor:
        return F.softplus(self.an_scale_raw[l - 1]) + ACTNORM_FLOOR

    def hidden_forward(self, t, x: torch.Tensor) -> torch.Tensor:
        """Output ``z_L(t, x)`` of the last (linear) layer, shape ``(B,)``."""
        t = time_column(t, x.shape[0])
        L = self.config.num_layers
        z = None
        for l in range(1, L + 1):
            pre = F.linear(x, self.wx[l - 1], self.bias[l - 1]) + self.time_bias[l - 1](t)
            if z is not None:
                pre = pre + F.linear(z, self.wz(l))
            if l < L:
                z = F.softplus(self.actnorm_scale(l) * pre + self.an_bias[l - 1])
            else:
                z = pre
        return z[:, 0]

    def r(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        scalar = t.dim() == 0
        out = self.r_mlp(t.reshape(-1))[:, 0]
        return out[0] if scalar else out

    def alpha(self, t) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=DTYPE)
        return torch.sigmoid(self.r(t) * (1.0 - t))

    def forward(self, t: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        t = time_column(t, x.shape[0])
        return (1.0 - t) * self.hidden_forward(t, x) + self.alpha(t) * (x * x).sum(-1)

    # -- helpers -----------------------------------------------------------

    def zero_(self):
        """Turn the network into the identity potential ``|x|^2 / 2``."""
        with torch.no_grad():
            for p in list(self.wx) + list(self.bias) + list(self.an_bias):
                p.zero_()
            for p in self.wz_raw:
                p.fill_(-math.inf)
            for m in self.time_bias:
                m.zero_()
            self.r_mlp.zero_()
        return self

    def min_effective_wz(self) -> float:
        with torch.no_grad():
            return min(float(self.wz(l).min()) for l in range(2, self.config.num_layers + 1))
