import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cofm.diffcore import DTYPE, NumericOverflowError
from cofm.fixtures import LinearHJPotential, QuadraticHJPotential
from cofm.potential import Potential, time_column
from cofm.sample import SamplerConfig, ode_sample, one_step, straightness

from conftest import randomized_picnn


def test_one_step_equals_single_euler_step_bitwise(rng):
    net = randomized_picnn()
    x0 = rng.standard_normal((32, 3))
    a = one_step(net, x0)
    b, _ = ode_sample(net, x0, 1)
    assert torch.equal(a, b)


@settings(max_examples=10, deadline=None)
@given(c=st.floats(-0.8, 3.0), n=st.sampled_from([1, 2, 3, 10, 37, 100]))
def test_exact_for_hj_fixtures(c, n):
    x0 = np.random.default_rng(0).standard_normal((16, 2))
    for pot in (QuadraticHJPotential(c), LinearHJPotential([c, -1.0])):
        want = one_step(pot, x0)
        got, traj = ode_sample(pot, x0, SamplerConfig(steps=n, record_trajectory=True))
        assert float((got - want).abs().max()) < 1e-9
        assert float(straightness(traj).max()) < 1e-9


def test_clamped_nodes_beyond_100_steps(rng):
    # for N > 100 the last nodes sit at 1 - delta, so the fixture is only approximately exact
    pot = QuadraticHJPotential(1.0)
    x0 = rng.standard_normal((16, 2))
    got, _ = ode_sample(pot, x0, 250)
    err = float((got - one_step(pot, x0)).abs().max())
    assert 0 < err < 1e-3


def test_trajectory_shape_and_endpoints(rng):
    net = randomized_picnn()
    x0 = torch.as_tensor(rng.standard_normal((5, 3)), dtype=DTYPE)
    x1, traj = ode_sample(net, x0, SamplerConfig(steps=4, record_trajectory=True))
    assert traj.shape == (5, 5, 3)
    assert torch.equal(traj[0], x0) and torch.equal(traj[-1], x1)
    assert ode_sample(net, x0, 4)[1] is None


def test_straightness_of_bent_path():
    traj = torch.as_tensor([[[0.0, 0.0]], [[1.0, 1.0]], [[2.0, 0.0]]], dtype=DTYPE)
    assert float(straightness(traj)[0]) == pytest.approx(1.0)


def test_overflow_reports_step():
    class Exploding(Potential):
        def forward(self, t, x):
            t = time_column(t, x.shape[0])
            return 0.5 * (x * x).sum(-1) + torch.where(t > 0.4, 1e308 * (x * x).sum(-1), 0 * t)

    with pytest.raises(NumericOverflowError, match="step 2 of 2: non-finite"):
        ode_sample(Exploding(), np.ones((2, 2)), 2)


@pytest.mark.parametrize("steps", [0, -1, 1.5])
def test_config_validation(steps):
    with pytest.raises(ValueError):
        SamplerConfig(steps=steps)
