"""Exact tabular ground truth.

Policy evaluation is a direct linear solve, control and game values come
from value iteration, and the projected fixed point of the linearized
class is an LSTD-style solve in the range coordinates of the support
Jacobian.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from neuraltd.env import (
    MarkovGame,
    TabularMdp,
    _as_mdp_and_policy,
    state_action_transition_matrix,
    stationary_distribution,
)
from neuraltd.errors import ConfigurationError, NumericError
from neuraltd.features import FeatureMap
from neuraltd.network import NetworkParams, support_jacobian

ORDERS = ("maxmin", "minmax")
MAX_SWEEPS = 1_000_000


def q_table_to_json(q) -> str:
    return json.dumps(np.asarray(q, dtype=np.float64).tolist())


def q_table_from_json(text) -> np.ndarray:
    q = np.asarray(json.loads(text), dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise ConfigurationError("Q-table has non-finite entries")
    return q


def bellman_pi(mdp: TabularMdp, policy, q) -> np.ndarray:
    """(T^pi q)(s, a) = r(s, a) + gamma sum_s' P(s'|s,a) sum_a' pi(a'|s') q(s', a')."""
    v = np.sum(policy.probs * q, axis=1)
    return mdp.reward + mdp.gamma * mdp.transition @ v


def exact_q_pi(env, policy) -> np.ndarray:
    """Solve (I - gamma P^pi) q = r.

    For a game ``policy`` is a pair and the result has shape (S, A1, A2).
    """
    mdp, pi = _as_mdp_and_policy(env, policy)
    n = mdp.n_states * mdp.n_actions
    a = np.eye(n) - mdp.gamma * state_action_transition_matrix(mdp, pi)
    try:
        q = np.linalg.solve(a, mdp.reward.ravel())
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"policy evaluation system is singular: {exc}") from None
    q = q.reshape(mdp.n_states, mdp.n_actions)
    if isinstance(env, MarkovGame):
        return q.reshape(env.n_states, env.n_actions_p1, env.n_actions_p2)
    return q


def _stop_threshold(gamma, tol):
    if tol <= 0:
        raise ConfigurationError("tol must be > 0")
    return tol * (1.0 - gamma) / gamma


def _value_iteration(reward, transition, gamma, tol, backup):
    if gamma == 0.0:
        _stop_threshold(1.0, tol)
        return reward.copy()
    eps = _stop_threshold(gamma, tol)
    q = np.zeros_like(reward)
    for _ in range(MAX_SWEEPS):
        q_new = reward + gamma * transition @ backup(q)
        diff = np.max(np.abs(q_new - q))
        q = q_new
        if diff <= eps:
            return q
    raise NumericError(f"value iteration did not reach tol={tol} in {MAX_SWEEPS} sweeps")


def exact_q_star(mdp: TabularMdp, tol=1e-10) -> np.ndarray:
    """Optimal Q by value iteration; sup-norm error at most ``tol``."""
    return _value_iteration(mdp.reward, mdp.transition, mdp.gamma, tol, lambda q: q.max(axis=1))


def backup_value(qmat, order="maxmin"):
    """Pure-strategy value of a Q matrix (rows: player 1, columns: player 2).

    ``maxmin`` is max over rows of the row minimum, ``minmax`` is min over
    rows of the row maximum.  Works on stacked matrices (..., A1, A2).
    """
    qmat = np.asarray(qmat)
    if order == "maxmin":
        return qmat.min(axis=-1).max(axis=-1)
    if order == "minmax":
        return qmat.max(axis=-1).min(axis=-1)
    raise ConfigurationError(f"order must be one of {ORDERS}, got {order!r}")


def exact_minimax_q(game: MarkovGame, tol=1e-10, order="maxmin") -> np.ndarray:
    """Minimax Q by value iteration with the selected pure-strategy order."""
    backup_value(np.zeros((1, 1)), order)
    p = game.transition.reshape(game.n_states, -1, game.n_states)
    r = game.reward.reshape(game.n_states, -1)
    shape = (game.n_states, game.n_actions_p1, game.n_actions_p2)
    q = _value_iteration(r, p, game.gamma, tol, lambda q: backup_value(q.reshape(shape), order))
    return q.reshape(shape)


@dataclass
class FixedPointReport:
    """Minimum-norm solution theta* = theta0 + delta of the projected Bellman equation."""

    theta_star: np.ndarray
    delta: np.ndarray
    inside_ball: bool
    omega: float
    delta_norm: float
    residual: float
    rank: int
    q_hat: np.ndarray
    support: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "delta_norm": self.delta_norm,
            "inside_ball": self.inside_ball,
            "residual": self.residual,
            "rank": self.rank,
            "q_hat": self.q_hat.tolist(),
        }


def range_basis(factor, rcond=None):
    """(singular values, right singular vectors of the numerical range, rank)."""
    _, s, vt = np.linalg.svd(factor, full_matrices=False)
    if rcond is None:
        rcond = max(factor.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(s > rcond * s[0])) if s.size and s[0] > 0 else 0
    return s, vt[:rank].T, rank


def projected_fixed_point(params_at_init: NetworkParams, feature_map: FeatureMap, env, policy,
                          omega) -> FixedPointReport:
    """Fixed point of Pi_F T^pi on the affine class around theta0.

    Works on the support of the stationary distribution, which is closed
    under P^pi.  delta is restricted to the range of the weighted Jacobian,
    so the answer is the minimum-norm one.
    """
    mdp, pi = _as_mdp_and_policy(env, policy)
    n_pairs = mdp.n_states * mdp.n_actions
    if feature_map.n_rows != n_pairs:
        raise ConfigurationError(f"feature map has {feature_map.n_rows} rows, environment has {n_pairs} pairs")
    d = stationary_distribution(mdp, pi).ravel()
    sup = np.flatnonzero(d > 0)
    w = d[sup]
    q0_all, j_all = support_jacobian(params_at_init, feature_map.table)
    q0, j = q0_all[sup], j_all[sup]
    p = state_action_transition_matrix(mdp, pi)[np.ix_(sup, sup)]
    a = np.eye(len(sup)) - mdp.gamma * p
    r = mdp.reward.ravel()[sup]

    sw = np.sqrt(w)
    _, v, rank = range_basis(sw[:, None] * j)
    if rank == 0:
        raise NumericError("support Jacobian is zero; the linearized class is constant")
    b = j @ v
    m = b.T @ (w[:, None] * (a @ b))
    rhs = b.T @ (w * (r - a @ q0))
    try:
        z = np.linalg.solve(m, rhs)
    except np.linalg.LinAlgError:
        raise NumericError(f"projected Bellman system is singular (rank {rank})") from None
    delta = v @ z

    q_hat_sup = q0 + j @ delta
    target = r + mdp.gamma * p @ q_hat_sup
    coef, *_ = np.linalg.lstsq(sw[:, None] * j, sw * (target - q0), rcond=None)
    projected = q0 + j @ coef
    residual = float(np.sqrt(np.sum(w * (projected - q_hat_sup) ** 2)))
    delta_norm = float(np.linalg.norm(delta))
    return FixedPointReport(
        theta_star=params_at_init.theta + delta,
        delta=delta,
        inside_ball=delta_norm <= omega,
        omega=float(omega),
        delta_norm=delta_norm,
        residual=residual,
        rank=rank,
        q_hat=q0_all + j_all @ delta,
        support=sup,
    )
