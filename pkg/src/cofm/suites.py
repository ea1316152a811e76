"""Self-check suites run by ``cofm oracle``.

Each check returns a :class:`CheckResult`; a suite passes when all do.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import DTYPE
from .fixtures import (
    ConstantPsiPotential, LinearHJPotential, QuadraticFlowPotential, QuadraticFormPotential, QuadraticHJPotential,
)
from .objectives import fm_loss, hj_residual, pf_residual
from .sample import ode_sample, one_step
from .transport import conjugate_eval, theorem1_oracle

FIXTURE_TOL = 1e-8
STRAIGHT_TOL = 1e-6
THEOREM1_TOL = 1e-4


@dataclass
class CheckResult:
    suite: str
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.value) and self.value < self.tol)


def _fixtures(d: int = 3):
    b = np.linspace(-1.2, 0.9, d)
    return {
        "linear": LinearHJPotential(b),
        "quadratic(c=1)": QuadraticHJPotential(1.0),
        "quadratic(c=-0.4)": QuadraticHJPotential(-0.4),
        "constant": ConstantPsiPotential(0.7),
        "quadratic-flow(A)": QuadraticFlowPotential(random_spd(np.random.default_rng(d), d)),
    }


def _endpoint_pairs(pot, z):
    # shift-consistent targets: the exact characteristic endpoint grad Psi(0, z)
    return one_step(pot, z)


def hj_fixture_suite(seed: int = 0, n: int = 256, d: int = 3) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    z = torch.as_tensor(rng.standard_normal((n, d)), dtype=DTYPE)
    t = torch.as_tensor(rng.uniform(0.0, 0.99, n), dtype=DTYPE)
    out = []
    for name, pot in _fixtures(d).items():
        x1 = _endpoint_pairs(pot, z)
        xt = (1 - t)[:, None] * z + t[:, None] * x1
        r = hj_residual(pot, t, xt, create_graph=False)
        out.append(CheckResult("hj-fixtures", f"{name}: max |R|", float(r.abs().max().detach()), FIXTURE_TOL))
        pf = pf_residual(pot, z, t)
        out.append(CheckResult("hj-fixtures", f"{name}: max |r_pf|", float(pf.norm(dim=-1).max().detach()), FIXTURE_TOL))
        out.append(CheckResult("hj-fixtures", f"{name}: fm loss", float(fm_loss(pot, z, x1, t).detach()), FIXTURE_TOL))
        worst = 0.0
        for steps in (1, 2, 10, 100):
            xN, _ = ode_sample(pot, z, steps)
            worst = max(worst, float((xN - x1).norm(dim=-1).max()))
        out.append(CheckResult("hj-fixtures", f"{name}: |Euler(N) - one-step|, N in 1,2,10,100", worst, STRAIGHT_TOL))
    return out


def random_spd(rng: np.random.Generator, d: int) -> np.ndarray:
    m = rng.standard_normal((d, d))
    return m.T @ m / d + 0.2 * np.eye(d)


def theorem1_suite(seed: int = 0, trials: int = 20, quadrature_n: int = 256) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(trials):
        d = int(rng.integers(1, 5))
        a = random_spd(rng, d)
        x0, x1 = rng.standard_normal(d), rng.standard_normal(d)
        lhs, rhs = theorem1_oracle(a, x0, x1, quadrature_n)
        out.append(CheckResult("theorem1", f"trial {i:2d} (d={d}) rel. err", abs(lhs - rhs) / abs(rhs), THEOREM1_TOL))
    return out


def fenchel_young_suite(seed: int = 0, n: int = 64) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for d in (1, 2, 4):
        a = random_spd(rng, d)
        pot = QuadraticFormPotential(a)
        x = torch.as_tensor(rng.standard_normal((n, d)), dtype=DTYPE)
        y = pot.gradient(0.0, x, create_graph=False)
        val, zstar = conjugate_eval(pot, 0.0, y)
        closed = 0.5 * (y.numpy() * np.linalg.solve(a, y.numpy().T).T).sum(-1)
        out.append(CheckResult("fenchel-young", f"d={d}: |conj - closed form|", float(np.abs(val.numpy() - closed).max()), 1e-8))
        gap = pot.psi(0.0, x) + val - (x * y).sum(-1)
        out.append(CheckResult("fenchel-young", f"d={d}: |FY gap| at y = grad Psi(x)", float(gap.abs().max().detach()), 1e-8))
        # solver stops at |grad| < 1e-6 and lambda_min(A) >= 0.2
        out.append(CheckResult("fenchel-young", f"d={d}: |argmax - x|", float((zstar - x).norm(dim=-1).max()), 1e-5))
    return out


SUITES = {
    "hj-fixtures": hj_fixture_suite,
    "theorem1": theorem1_suite,
    "fenchel-young": fenchel_young_suite,
}


def run_suites(names) -> list[CheckResult]:
    if "all" in names:
        names = list(SUITES)
    results = []
    for n in names:
        results.extend(SUITES[n]())
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max((len(r.name) for r in results), default=10)
    lines = [f"{'suite':<14} {'check':<{width}} {'value':>12} {'tol':>9}  status"]
    for r in results:
        lines.append(
            f"{r.suite:<14} {r.name:<{width}} {r.value:>12.3e} {r.tol:>9.1e}  {'PASS' if r.passed else 'FAIL'}"
        )
    return "\n".join(lines)
