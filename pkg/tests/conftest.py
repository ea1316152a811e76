import numpy as np
import pytest
import torch

from cofm.diffcore import DTYPE
from cofm.picnn import PICNN, PicnnConfig


def randomized_picnn(d: int = 3, hidden=(8, 8), time_hidden=(6,), seed: int = 0, spread: float = 0.5) -> PICNN:
    """PICNN with every parameter perturbed, including raw W_z, ActNorm and r(t)."""
    net = PICNN(PicnnConfig(d, hidden, time_hidden), seed=seed)
    gen = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(spread * torch.randn(p.shape, generator=gen, dtype=DTYPE))
    return net


def central_fd(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of a scalar function of a flat float64 vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report(criterion: int, name: str, passed: bool, detail: str) -> None:
    line = f"criterion {criterion} {'PASS' if passed else 'FAIL'}: {name} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
