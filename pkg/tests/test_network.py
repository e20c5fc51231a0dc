import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuraltd.errors import ConfigurationError
from neuraltd.network import (
    ACTIVATIONS,
    BallConstraint,
    NetworkParams,
    flatten,
    forward,
    grad_theta,
    init_params,
    linearized_q,
    load_checkpoint,
    n_params,
    project_ball,
    q_values,
    save_checkpoint,
    support_jacobian,
    value_and_grad,
)
from neuraltd.diagnostics import finite_difference_grad


def _params(depth, width, d, seed=0, activation="elu", scaling="ntk"):
    return init_params(depth, width, d, seed=seed, activation=activation, scaling=scaling)[0]


def test_single_neuron_example():
    p = NetworkParams(np.array([0.0]), np.array([1.0]), 1, 1, 1)
    assert forward(p, np.array([1.0]))[0] == 0.0
    g = grad_theta(p, np.array([1.0]))
    np.testing.assert_allclose(g, [1.0])


def test_one_layer_closed_form():
    p = _params(1, 8, 3, seed=2)
    x = np.array([0.3, -0.2, 0.9])
    w = p.theta.reshape(3, 8).T
    expected = np.sum(p.b * ACTIVATIONS["elu"](w @ x)) / math.sqrt(8)
    assert abs(q_values(p, x) - expected) < 1e-14


def test_column_major_layout():
    p = _params(2, 3, 2, seed=1)
    w1, w2 = p.weights()
    np.testing.assert_array_equal(flatten([w1, w2]), p.theta)
    assert w1.shape == (3, 2) and w2.shape == (3, 3)
    assert w1[1, 0] == p.theta[1]


def test_literal_scaling_divides_output():
    a, b = _params(2, 16, 3, scaling="ntk"), _params(2, 16, 3, scaling="literal")
    x = np.array([1.0, 0.0, 0.0])
    assert abs(q_values(b, x) - q_values(a, x) / 4.0) < 1e-14


def test_init_deterministic_and_theta0_independent():
    p1, t1 = init_params(2, 8, 3, seed=4)
    p2, _ = init_params(2, 8, 3, seed=4)
    assert p1.theta.tobytes() == p2.theta.tobytes()
    assert t1 is not p1.theta and np.array_equal(t1, p1.theta)
    assert set(np.unique(p1.b)) <= {-1.0, 1.0}
    assert p1.n == n_params(2, 8, 3) == 8 * 3 + 64


def test_invalid_params():
    with pytest.raises(ConfigurationError):
        init_params(0, 4, 2)
    with pytest.raises(ConfigurationError):
        NetworkParams(np.zeros(4), np.array([1.0, 0.5]), 1, 2, 2)
    with pytest.raises(ConfigurationError):
        _params(1, 4, 2, activation="relu")
    with pytest.raises(ConfigurationError):
        q_values(_params(1, 4, 2), np.zeros(3))


@pytest.mark.parametrize("activation", sorted(ACTIVATIONS))
@pytest.mark.parametrize("depth", [1, 2, 3])
def test_gradient_matches_finite_differences(activation, depth):
    p = _params(depth, 6, 3, seed=depth, activation=activation)
    x = np.random.default_rng(depth).standard_normal(3)
    g = grad_theta(p, x)
    fd = finite_difference_grad(p, x, h=1e-5)
    assert np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12) < 1e-6


def test_batched_matches_single():
    p = _params(3, 8, 4, seed=3)
    x = np.random.default_rng(0).standard_normal((5, 4))
    q, jac = support_jacobian(p, x)
    for i in range(5):
        qi, gi = value_and_grad(p, x[i])
        assert abs(q[i] - qi) < 1e-13
        np.testing.assert_allclose(jac[i], gi, atol=1e-13)


def test_out_buffer_is_used():
    p = _params(2, 4, 2)
    buf = np.empty(p.n)
    _, g = value_and_grad(p, np.array([1.0, 0.0]), out=buf)
    assert g is buf


def test_activation_constants():
    z = np.linspace(-10, 10, 200_001)
    for act in ACTIVATIONS.values():
        d1 = np.max(np.abs(act.derivative(z)))
        assert d1 <= act.l1 + 1e-9
        assert d1 >= act.l1 - 1e-4
        d2 = np.max(np.abs(np.gradient(act.derivative(z), z)))
        assert d2 <= act.l2 + 1e-4


def test_linearized_q_at_init():
    p = _params(2, 16, 3)
    x = np.array([0.0, 1.0, 0.0])
    assert abs(linearized_q(p, p.theta, x) - q_values(p, x)) < 1e-15


def test_projection_examples():
    ball = BallConstraint(np.zeros(2), 1.0)
    np.testing.assert_allclose(project_ball(ball, np.array([3.0, 4.0])), [0.6, 0.8])
    inside = np.array([0.1, 0.2])
    assert project_ball(ball, inside) is inside
    zero = BallConstraint(np.array([1.0, 1.0]), 0.0)
    np.testing.assert_array_equal(project_ball(zero, np.array([5.0, -2.0])), [1.0, 1.0])
    with pytest.raises(ConfigurationError):
        BallConstraint(np.zeros(2), -1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.floats(0.0, 10.0))
def test_projection_properties(v, radius):
    ball = BallConstraint(np.array([0.5, -0.5, 1.0]), radius)
    once = project_ball(ball, np.array(v))
    assert np.linalg.norm(once - ball.center) <= radius + 1e-9
    twice = project_ball(ball, once)
    np.testing.assert_array_equal(once, twice)


def test_checkpoint_round_trip(tmp_path):
    p = _params(2, 5, 3, seed=8)
    save_checkpoint(tmp_path / "ck.bin", p)
    back = load_checkpoint(tmp_path / "ck.bin")
    assert back.theta.tobytes() == p.theta.tobytes()
    assert back.b.tobytes() == p.b.tobytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes((tmp_path / "ck.bin").read_bytes()[:-8])
    with pytest.raises(ConfigurationError):
        load_checkpoint(tmp_path / "short.bin")
