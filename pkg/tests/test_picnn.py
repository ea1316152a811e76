import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cofm.diffcore import DTYPE
from cofm.picnn import PICNN, PicnnConfig, softplus_inv
from cofm.potential import DomainError

from conftest import randomized_picnn


def _hand_net() -> PICNN:
    # d = 1, one hidden unit, unit weights, no time dependence
    net = PICNN(PicnnConfig(1, (1,), (2,))).zero_()
    with torch.no_grad():
        net.wx[0].fill_(1.0)
        net.wx[1].fill_(1.0)
        net.wz_raw[0].fill_(softplus_inv(1.0))
    return net


def test_hand_evaluation():
    net = _hand_net()
    x = torch.ones((1, 1), dtype=DTYPE)
    # z1 = log(1 + e), z2 = x + z1
    assert float(net.hidden_forward(0.0, x)) == pytest.approx(2.3132616875182228, abs=1e-14)
    # alpha(0) = sigmoid(0) = 1/2
    assert float(net(0.0, x)) == pytest.approx(2.8132616875182228, abs=1e-14)
    assert float(net(0.5, x)) == pytest.approx(0.5 * 2.3132616875182228 + 0.5, abs=1e-14)


def test_alpha_values():
    net = PICNN(PicnnConfig(2, (4,), (3,))).zero_()
    assert float(net.alpha(0.0)) == 0.5
    with torch.no_grad():
        net.r_mlp.biases[-1].fill_(1.0)
    assert float(net.alpha(0.0)) == pytest.approx(0.7310585786300049, abs=1e-15)
    assert float(net.alpha(1.0)) == 0.5


def test_zero_network_is_identity_potential(rng):
    net = PICNN(PicnnConfig(3, (5, 5), (4,))).zero_()
    x = torch.as_tensor(rng.standard_normal((6, 3)), dtype=DTYPE)
    for t in (0.0, 0.3, 0.9):
        assert torch.equal(net(t, x), 0.5 * (x * x).sum(-1))
        assert torch.allclose(net.velocity(t, x), torch.zeros_like(x))


def test_initial_weights_positive_and_small():
    net = PICNN(PicnnConfig(4, (16, 16, 16), (8,)))
    assert net.min_effective_wz() > 0
    w = net.wz(2)
    assert float(w.mean()) == pytest.approx(0.5 / 16, rel=0.1)
    assert torch.allclose(net.actnorm_scale(1), torch.ones(16, dtype=DTYPE))


def test_seeded_init_is_deterministic():
    a = PICNN(PicnnConfig(3), seed=5).state_dict()
    b = PICNN(PicnnConfig(3), seed=5).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 1.0), scale=st.floats(0.1, 4.0))
def test_convex_in_x(seed, t, scale):
    net = randomized_picnn(seed=seed)
    gen = np.random.default_rng(seed)
    x = torch.as_tensor(scale * gen.standard_normal((16, 3)), dtype=DTYPE)
    y = torch.as_tensor(scale * gen.standard_normal((16, 3)), dtype=DTYPE)
    mid = net(t, 0.5 * (x + y))
    avg = 0.5 * (net(t, x) + net(t, y))
    assert bool((mid <= avg + 1e-10).all())
    gx, gy = net.gradient(t, x, create_graph=False), net.gradient(t, y, create_graph=False)
    assert bool((((gx - gy) * (x - y)).sum(-1) >= -1e-10).all())


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), t=st.floats(0.0, 0.99))
def test_hessian_dominates_alpha(seed, t):
    # (1 - t) z_L is convex, so Hess Psi >= 2 alpha(t) I
    net = randomized_picnn(seed=seed)
    x = torch.as_tensor(np.random.default_rng(seed).standard_normal(3), dtype=DTYPE)
    h = torch.autograd.functional.hessian(lambda v: net(t, v[None])[0], x)
    lo = float(torch.linalg.eigvalsh(h).min())
    assert lo >= 2 * float(net.alpha(t)) - 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.0, 10.0))
def test_terminal_anchor(seed, scale):
    net = randomized_picnn(seed=seed)
    x = torch.as_tensor(scale * np.random.default_rng(seed).standard_normal((8, 3)), dtype=DTYPE)
    assert float((net(1.0, x) - 0.5 * (x * x).sum(-1)).abs().max()) < 1e-12
    assert float(net.alpha(1.0)) == 0.5


def test_velocity_domain():
    net = randomized_picnn()
    x = torch.zeros((2, 3), dtype=DTYPE)
    net.velocity(0.99, x)
    with pytest.raises(DomainError):
        net.velocity(0.995, x)
    with pytest.raises(DomainError):
        net.psi_small(-0.1, x)


def test_velocity_definition(rng):
    net = randomized_picnn()
    x = torch.as_tensor(rng.standard_normal((4, 3)), dtype=DTYPE)
    t = 0.4
    v = net.velocity(t, x)
    assert torch.allclose(v, (net.gradient(t, x) - x) / (1 - t))


def test_config_validation():
    with pytest.raises(ValueError):
        PicnnConfig(0)
    with pytest.raises(ValueError):
        PicnnConfig(2, hidden=())
    assert PicnnConfig(2, (3, 4)).widths == (3, 4, 1)
    assert softplus_inv(math.log1p(math.e)) == pytest.approx(1.0)
