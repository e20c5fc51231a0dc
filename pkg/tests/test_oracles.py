import numpy as np
import pytest

from neuraltd.env import MarkovGame, TabularMdp, TabularPolicy, random_game, random_mdp, stationary_distribution
from neuraltd.errors import ConfigurationError
from neuraltd.features import one_hot_features, random_unit_features
from neuraltd.network import init_params
from neuraltd.oracles import (
    backup_value,
    bellman_pi,
    exact_minimax_q,
    exact_q_pi,
    exact_q_star,
    projected_fixed_point,
    q_table_from_json,
    q_table_to_json,
    range_basis,
)


def _single(reward, gamma):
    return TabularMdp(np.ones((1, 1, 1)), np.array([[reward]]), gamma)


def test_single_state_closed_forms():
    pi = TabularPolicy.uniform(1, 1)
    np.testing.assert_allclose(exact_q_pi(_single(1.0, 0.9), pi), [[10.0]], atol=1e-12)
    np.testing.assert_allclose(exact_q_pi(_single(1.0, 0.0), pi), [[1.0]])
    np.testing.assert_allclose(exact_q_star(_single(1.0, 0.5)), [[2.0]], atol=1e-10)


def test_q_pi_is_bellman_fixed_point(mdp5, uniform5):
    q = exact_q_pi(mdp5, uniform5)
    np.testing.assert_allclose(bellman_pi(mdp5, uniform5, q), q, atol=1e-12)


def test_q_star_dominates_and_is_greedy_fixed_point(mdp5, uniform5):
    q = exact_q_star(mdp5, tol=1e-12)
    assert np.all(q >= exact_q_pi(mdp5, uniform5) - 1e-9)
    backup = mdp5.reward + mdp5.gamma * mdp5.transition @ q.max(axis=1)
    np.testing.assert_allclose(backup, q, atol=1e-10)


def test_q_star_tolerance_rejected(mdp5):
    with pytest.raises(ConfigurationError):
        exact_q_star(mdp5, tol=0.0)


def test_backup_value_orders():
    m = np.array([[3.0, 1.0], [2.0, 4.0]])
    assert backup_value(m, "maxmin") == 2.0
    assert backup_value(m, "minmax") == 3.0
    with pytest.raises(ConfigurationError):
        backup_value(m, "nash")


def test_minimax_single_action_matches_q_pi():
    mdp = random_mdp(3, 1, 0.8, seed=1)
    game = MarkovGame(mdp.transition[:, :, None, :], mdp.reward[:, :, None], mdp.gamma)
    q = exact_minimax_q(game)
    np.testing.assert_allclose(q[:, :, 0], exact_q_pi(mdp, TabularPolicy.uniform(3, 1)), atol=1e-9)


def test_minimax_fixed_point_and_order_bound():
    g = random_game(2, 2, 2, 0.9, seed=0)
    q = exact_minimax_q(g, tol=1e-12)
    p = g.transition.reshape(2, 4, 2)
    backup = g.reward.reshape(2, 4) + g.gamma * p @ backup_value(q, "maxmin")
    np.testing.assert_allclose(backup.reshape(q.shape), q, atol=1e-10)


def test_backup_value_example_matrices():
    m = np.array([[1.0, 0.0], [2.0, -1.0]])
    assert backup_value(m, "maxmin") == 0.0
    assert backup_value(m, "minmax") == 1.0
    c = np.full((2, 2), 0.7)
    assert backup_value(c, "maxmin") == backup_value(c, "minmax") == 0.7


def test_q_pi_game_shape():
    g = random_game(2, 2, 3, 0.9, seed=2)
    pair = (TabularPolicy.uniform(2, 2), TabularPolicy.uniform(2, 3))
    assert exact_q_pi(g, pair).shape == (2, 2, 3)


def test_q_table_json_round_trip():
    q = np.array([[1.5, -2.0], [0.1, 3.0]])
    np.testing.assert_array_equal(q_table_from_json(q_table_to_json(q)), q)
    with pytest.raises(ConfigurationError):
        q_table_from_json("[[NaN]]")


def test_range_basis_rank():
    f = np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    s, v, rank = range_basis(f)
    assert rank == 1
    np.testing.assert_allclose(np.abs(v[:, 0]), [1.0, 0.0, 0.0])


def test_projected_fixed_point_full_rank_matches_q_pi(mdp5, uniform5):
    params, _ = init_params(2, 64, 10, seed=0)
    rep = projected_fixed_point(params, one_hot_features(5, 2), mdp5, uniform5, omega=100.0)
    np.testing.assert_allclose(rep.q_hat, exact_q_pi(mdp5, uniform5).ravel(), atol=1e-8)
    assert rep.rank == 10
    assert rep.residual < 1e-10
    np.testing.assert_allclose(rep.theta_star - params.theta, rep.delta)


def test_projected_fixed_point_low_rank_is_projected_bellman_solution(mdp5, uniform5):
    fm = random_unit_features(10, 3, seed=1)
    params, _ = init_params(1, 2, 3, seed=0)
    rep = projected_fixed_point(params, fm, mdp5, uniform5, omega=1.0)
    assert rep.rank <= 6
    assert rep.residual < 1e-9
    assert rep.inside_ball == (rep.delta_norm <= 1.0)
    d = stationary_distribution(mdp5, uniform5).ravel()
    assert np.all(d > 0)


def test_projected_fixed_point_rows_checked(mdp5, uniform5):
    params, _ = init_params(1, 4, 3, seed=0)
    with pytest.raises(ConfigurationError):
        projected_fixed_point(params, random_unit_features(4, 3, seed=0), mdp5, uniform5, 1.0)
