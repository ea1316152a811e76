"""Synthetic W2 benchmark instances, distribution samplers and the linear baseline.

A benchmark's ground-truth OT map is the gradient of a frozen random ICNN
plus ``eps |x|^2``; the target is the pushforward of ``N(0, I)`` by it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import container
from .diffcore import DTYPE, NotSPDError
from .picnn import PICNN, PicnnConfig
from .potential import Potential, time_column
from .transport import GaussianSpec, LinearMap, gaussian_ot_map, potential_map

BENCH_EPS = 0.1
VAR_SAMPLES = 100_000
DIST_KINDS = ("standard_normal", "gaussian", "eight_gaussians", "benchmark")


@dataclass(frozen=True)
class BenchShape:
    """How the random ICNN weights are rescaled after the standard init."""

    first_gain: float = 20.0  # sharp first-layer ridges
    deep_gain: float = 0.2  # weak direct x-paths in later layers
    wz_mult: float = 2.0
    bias_spread: float = 10.0
    signal_ratio: float = 10.0  # ICNN gradient variance / floor gradient variance


class BenchmarkPotential(Potential):
    """Time-independent ``Psi(x) = scale * z_L(x) + eps |x|^2`` from a frozen ICNN."""

    def __init__(self, dim: int, width: int, seed: int, shape: BenchShape = BenchShape(), eps: float = BENCH_EPS):
        super().__init__()
        self.eps = eps
        self.shape = shape
        self.scale = 1.0
        self.icnn = PICNN(PicnnConfig(dim, hidden=(width, width), time_hidden=(8,)), seed=seed)
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            self.icnn.wx[0].mul_(shape.first_gain)
            for w in self.icnn.wx[1:]:
                w.mul_(shape.deep_gain)
            for w in self.icnn.wz_raw:
                w.copy_(torch.log(torch.expm1(shape.wz_mult * F.softplus(w))))
            self.icnn.bias[0].copy_((torch.rand(width, generator=gen, dtype=DTYPE) * 2 - 1) * shape.bias_spread)
        self.requires_grad_(False)

    def forward(self, t, x):
        zero = torch.zeros(x.shape[0], dtype=DTYPE)
        z = self.icnn.hidden_forward(zero, x)
        return self.scale * z + self.eps * (x * x).sum(-1) + 0.0 * time_column(t, x.shape[0])

    def calibrate(self, rng: np.random.Generator, n: int = 5000) -> float:
        """Set ``scale`` so the ICNN part of the gradient carries ``signal_ratio``
        times the variance of the ``eps |x|^2`` part under ``N(0, I)``."""
        d = self.icnn.config.input_dim
        eps, self.eps, self.scale = self.eps, 0.0, 1.0
        v, _ = total_variance(potential_map(self)(rng.standard_normal((n, d))))
        self.eps = eps
        self.scale = math.sqrt(self.shape.signal_ratio * (2 * eps) ** 2 * d / v)
        return self.scale


@dataclass
class BenchmarkInstance:
    dim: int
    seed: int
    potential: BenchmarkPotential
    var_p1: float
    var_p1_stderr: float
    var_samples: int
    width: int

    def T_star(self, x) -> np.ndarray:
        return potential_map(self.potential)(x)

    def source_spec(self) -> "DistributionSpec":
        return DistributionSpec("standard_normal", self.dim)

    def target_spec(self) -> "DistributionSpec":
        return DistributionSpec("benchmark", self.dim, benchmark=self)

    def meta(self) -> dict:
        return {
            "kind": "benchmark",
            "dim": self.dim,
            "seed": self.seed,
            "eps": self.potential.eps,
            "width": self.width,
            "scale": self.potential.scale,
            "shape": asdict(self.potential.shape),
            "var_p1": self.var_p1,
            "var_p1_stderr": self.var_p1_stderr,
            "var_samples": self.var_samples,
        }

    def save(self, path):
        arrays = {k: v.numpy() for k, v in self.potential.state_dict().items()}
        return container.save(path, self.meta(), arrays)

    @classmethod
    def load(cls, path) -> "BenchmarkInstance":
        meta, arrays = container.load(path)
        if meta.get("kind") != "benchmark":
            raise container.ContainerError(f"{path} does not hold a benchmark instance")
        pot = BenchmarkPotential(meta["dim"], meta["width"], 0, BenchShape(**meta["shape"]), meta["eps"])
        pot.load_state_dict({k: torch.as_tensor(v, dtype=DTYPE) for k, v in arrays.items()})
        pot.scale = meta["scale"]
        return cls(
            meta["dim"], meta["seed"], pot, meta["var_p1"], meta["var_p1_stderr"],
            meta["var_samples"], meta["width"],
        )


@dataclass
class DistributionSpec:
    kind: str
    dim: int
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    radius: float = 8.0
    component_std: float = 0.5
    benchmark: BenchmarkInstance | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in DIST_KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if self.kind == "gaussian":
            g = GaussianSpec(self.mean, self.cov)
            self.mean, self.cov = g.mean, g.cov
            if g.dim != self.dim:
                raise ValueError("gaussian parameters do not match dim")
        if self.kind == "eight_gaussians" and (self.dim != 2 or self.component_std < 0 or self.radius <= 0):
            raise ValueError("eight_gaussians needs dim 2, radius > 0, component_std >= 0")
        if self.kind == "benchmark" and (self.benchmark is None or self.benchmark.dim != self.dim):
            raise ValueError("benchmark distribution needs a matching BenchmarkInstance")


def eight_gaussian_centers(radius: float = 8.0) -> np.ndarray:
    ang = 2 * np.pi * np.arange(8) / 8
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def sample(spec: DistributionSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` i.i.d. draws from ``spec`` as an ``(n, d)`` array."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if spec.kind == "standard_normal":
        return rng.standard_normal((n, spec.dim))
    if spec.kind == "gaussian":
        l = np.linalg.cholesky(spec.cov)
        return spec.mean + rng.standard_normal((n, spec.dim)) @ l.T
    if spec.kind == "eight_gaussians":
        comp = rng.integers(0, 8, size=n)
        noise = rng.standard_normal((n, 2))
        return eight_gaussian_centers(spec.radius)[comp] + spec.component_std * noise
    return spec.benchmark.T_star(rng.standard_normal((n, spec.dim)))


def total_variance(x: np.ndarray) -> tuple[float, float]:
    """Trace of the sample covariance and the standard error of that estimate."""
    dev = ((x - x.mean(0)) ** 2).sum(-1)
    n = x.shape[0]
    return float(dev.sum() / (n - 1)), float(dev.std(ddof=1) / math.sqrt(n))


def bench_width(dim: int) -> int:
    return max(64, 2 * dim)


def make_benchmark(dim: int, seed: int, var_samples: int = VAR_SAMPLES) -> BenchmarkInstance:
    if not 1 <= dim <= 256:
        raise ValueError("benchmark dimension must lie in 1..256")
    width = bench_width(dim)
    init_seed = int(np.random.SeedSequence([seed, dim, 0]).generate_state(1)[0])
    pot = BenchmarkPotential(dim, width, init_seed)
    pot.calibrate(np.random.default_rng([seed, dim, 2]))
    inst = BenchmarkInstance(dim, seed, pot, 0.0, 0.0, var_samples, width)
    rng = np.random.default_rng([seed, dim, 1])
    y = inst.T_star(rng.standard_normal((var_samples, dim)))
    inst.var_p1, inst.var_p1_stderr = total_variance(y)
    return inst


def linear_baseline(z, x, ridge: float = 1e-6) -> LinearMap:
    """Affine map matching the first two moments of ``z`` to those of ``x``."""
    z, x = np.asarray(z, dtype=np.float64), np.asarray(x, dtype=np.float64)
    d = z.shape[1]
    if z.shape[0] < d + 1 or x.shape[0] < d + 1:
        raise ValueError("need at least d + 1 samples from each distribution")

    def fit(a):
        cov = np.atleast_2d(np.cov(a, rowvar=False))
        try:
            return GaussianSpec(a.mean(0), cov)
        except NotSPDError:
            warnings.warn("singular empirical covariance; adding ridge", RuntimeWarning, stacklevel=3)
            return GaussianSpec(a.mean(0), cov + ridge * np.eye(d))

    return gaussian_ot_map(fit(z), fit(x))
