"""Finite MDPs, zero-sum Markov games, policies and Markovian sampling.

Environments are immutable value objects holding dense float64 arrays.
Samplers draw state transitions and actions from two independent RNG
streams spawned from one seed, so a game with 1x1 action sets produces the
same state sequence as the equivalent single-action MDP.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from scipy.stats import norm

from neuraltd.errors import ConfigurationError, DiagnosticsError

ROW_SUM_TOL = 1e-12


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


def _check_gamma(gamma, strict=False):
    # gamma = 0 is admitted on hand-built instances for the degenerate cases.
    lo_ok = gamma > 0.0 if strict else gamma >= 0.0
    if not (lo_ok and gamma < 1.0):
        raise ConfigurationError(f"gamma must lie in {'(0' if strict else '[0'}, 1), got {gamma}")


def _check_stochastic(p, what):
    if np.any(p < 0):
        raise ConfigurationError(f"{what} has negative entries")
    err = np.max(np.abs(p.sum(axis=-1) - 1.0)) if p.size else 0.0
    if err > ROW_SUM_TOL:
        raise ConfigurationError(f"{what} rows do not sum to 1 (max error {err:.3e})")


@dataclass(frozen=True)
class TabularMdp:
    """Finite discounted MDP with deterministic rewards r(s, a).

    ``transition[s, a, s']`` is P(s' | s, a); ``reward[s, a]`` lies in
    [-r_max, r_max].
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float
    r_max: float | None = None

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        if p.ndim != 3 or p.shape[0] != p.shape[2] or p.shape[0] < 1 or p.shape[1] < 1:
            raise ConfigurationError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise ConfigurationError(f"reward shape {r.shape} does not match {p.shape[:2]}")
        _check_stochastic(p, "transition")
        _check_gamma(float(self.gamma))
        r_max = float(np.max(np.abs(r))) if self.r_max is None else float(self.r_max)
        if r_max < 0 or np.max(np.abs(r)) > r_max:
            raise ConfigurationError("rewards exceed r_max")
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))
        object.__setattr__(self, "r_max", r_max)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "r_max": self.r_max,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TabularMdp":
        p = np.asarray(doc["transition"], dtype=np.float64)
        r = np.asarray(doc["reward"], dtype=np.float64)
        if p.shape[:2] != (doc["n_states"], doc["n_actions"]):
            raise ConfigurationError("declared sizes do not match the transition tensor")
        return cls(p, r, doc["gamma"], doc.get("r_max"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "TabularMdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class MarkovGame:
    """Two-player zero-sum Markov game; player 1 receives ``reward``.

    ``transition[s, a1, a2, s']`` and ``reward[s, a1, a2]``.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        p = _frozen(self.transition)
        r = _frozen(self.reward)
        if p.ndim != 4 or p.shape[0] != p.shape[3] or min(p.shape) < 1:
            raise ConfigurationError(f"transition must have shape (S, A1, A2, S), got {p.shape}")
        if r.shape != p.shape[:3]:
            raise ConfigurationError(f"reward shape {r.shape} does not match {p.shape[:3]}")
        _check_stochastic(p, "transition")
        _check_gamma(float(self.gamma))
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions_p1(self) -> int:
        return self.transition.shape[1]

    @property
    def n_actions_p2(self) -> int:
        return self.transition.shape[2]

    def as_joint_mdp(self) -> TabularMdp:
        """The MDP over joint actions ``a = a1 * n_actions_p2 + a2``."""
        s, a1, a2 = self.reward.shape
        return TabularMdp(
            self.transition.reshape(s, a1 * a2, s),
            self.reward.reshape(s, a1 * a2),
            self.gamma,
        )

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions_p1": self.n_actions_p1,
            "n_actions_p2": self.n_actions_p2,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MarkovGame":
        p = np.asarray(doc["transition"], dtype=np.float64)
        if p.shape[:3] != (doc["n_states"], doc["n_actions_p1"], doc["n_actions_p2"]):
            raise ConfigurationError("declared sizes do not match the transition tensor")
        return cls(p, np.asarray(doc["reward"], dtype=np.float64), doc["gamma"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MarkovGame":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TabularPolicy:
    """Stochastic policy ``probs[s, a] = pi(a | s)``."""

    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2 or p.shape[1] < 1:
            raise ConfigurationError(f"policy must have shape (S, A) with A >= 1, got {p.shape}")
        _check_stochastic(p, "policy")
        object.__setattr__(self, "probs", p)

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, n_states, n_actions) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))


def joint_policy(pi1: TabularPolicy, pi2: TabularPolicy) -> TabularPolicy:
    """Product policy over joint actions ``a1 * |A2| + a2``."""
    if pi1.n_states != pi2.n_states:
        raise ConfigurationError("policies disagree on the number of states")
    probs = pi1.probs[:, :, None] * pi2.probs[:, None, :]
    return TabularPolicy(probs.reshape(pi1.n_states, -1))


def _as_mdp_and_policy(env, policy):
    if isinstance(env, MarkovGame):
        pi1, pi2 = policy
        return env.as_joint_mdp(), joint_policy(pi1, pi2)
    return env, policy


class Transition(NamedTuple):
    s: int
    a: int
    r: float
    s_next: int
    a_next: int


class GameTransition(NamedTuple):
    s: int
    a1: int
    a2: int
    r: float
    s_next: int


@dataclass(frozen=True)
class Trajectory:
    """Chained transitions stored column-wise.

    For MDP trajectories ``actions`` has shape (T,) and ``next_actions`` is
    filled; for game trajectories ``actions`` has shape (T, 2).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    next_actions: np.ndarray | None
    seed: int | None = None

    @property
    def is_game(self) -> bool:
        return self.actions.ndim == 2

    def __len__(self) -> int:
        return len(self.states)

    def __getitem__(self, t):
        if self.is_game:
            return GameTransition(int(self.states[t]), int(self.actions[t, 0]), int(self.actions[t, 1]),
                                  float(self.rewards[t]), int(self.next_states[t]))
        return Transition(int(self.states[t]), int(self.actions[t]), float(self.rewards[t]),
                          int(self.next_states[t]), int(self.next_actions[t]))

    def __iter__(self) -> Iterator:
        for t in range(len(self)):
            yield self[t]


def random_mdp(n_states, n_actions, gamma, r_max=1.0, seed=0) -> TabularMdp:
    """Random MDP: exponential draws normalized per row, uniform rewards."""
    if n_states < 1 or n_actions < 1:
        raise ConfigurationError("n_states and n_actions must be >= 1")
    _check_gamma(gamma, strict=True)
    rng = np.random.default_rng(seed)
    p = rng.exponential(size=(n_states, n_actions, n_states))
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.uniform(-r_max, r_max, size=(n_states, n_actions))
    return TabularMdp(p, r, gamma, r_max)


def random_game(n_states, n_actions_p1, n_actions_p2, gamma, r_max=1.0, seed=0) -> MarkovGame:
    if min(n_states, n_actions_p1, n_actions_p2) < 1:
        raise ConfigurationError("game sizes must be >= 1")
    _check_gamma(gamma, strict=True)
    rng = np.random.default_rng(seed)
    p = rng.exponential(size=(n_states, n_actions_p1, n_actions_p2, n_states))
    p /= p.sum(axis=-1, keepdims=True)
    r = rng.uniform(-r_max, r_max, size=(n_states, n_actions_p1, n_actions_p2))
    return MarkovGame(p, r, gamma)


def two_state_chain(p_stay, gamma=0.9, reward=(0.0, 0.0)) -> TabularMdp:
    """Single-action chain that stays with probability ``p_stay``."""
    p = np.array([[[p_stay, 1 - p_stay]], [[1 - p_stay, p_stay]]])
    return TabularMdp(p, np.asarray(reward, dtype=float).reshape(2, 1), gamma)


def grid_world(rows, cols, gamma=0.9, slip=0.1, goal=None) -> TabularMdp:
    """Four-action grid world; reward 1 for acting in the goal cell.

    With probability ``slip`` the move goes to a uniformly random neighbour
    direction instead.  The goal teleports back to cell 0 so the chain stays
    ergodic.
    """
    n = rows * cols
    goal = n - 1 if goal is None else goal
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    p = np.zeros((n, 4, n))
    r = np.zeros((n, 4))
    for s in range(n):
        i, j = divmod(s, cols)
        for a in range(4):
            if s == goal:
                p[s, a, 0] = 1.0
                r[s, a] = 1.0
                continue
            for b, (di, dj) in enumerate(moves):
                w = (1 - slip) * (a == b) + slip / 4
                ii = min(max(i + di, 0), rows - 1)
                jj = min(max(j + dj, 0), cols - 1)
                p[s, a, ii * cols + jj] += w
    return TabularMdp(p, r, gamma, 1.0)


def discretized_walk(n_bins, gamma=0.9, step=0.1, noise=0.05) -> TabularMdp:
    """Continuous walk on [0, 1] tabularized on a fixed grid.

    From the bin centre x, action a in {left, right} moves to
    ``clip(x -/+ step + noise * N(0, 1))``; bin probabilities are Gaussian
    masses (the clipped tails land in the edge bins).  Reward is
    ``1 - 2|x - 0.5|``.
    """
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    p = np.zeros((n_bins, 2, n_bins))
    for s, x in enumerate(centres):
        for a, direction in enumerate((-1.0, 1.0)):
            cdf = norm.cdf(edges, loc=x + direction * step, scale=noise)
            mass = np.diff(cdf)
            mass[0] += cdf[0]
            mass[-1] += 1.0 - cdf[-1]
            p[s, a] = mass / mass.sum()
    r = np.repeat((1.0 - 2.0 * np.abs(centres - 0.5))[:, None], 2, axis=1)
    return TabularMdp(p, r, gamma, 1.0)


def epsilon_greedy(q_values, epsilon) -> TabularPolicy:
    """pi(a|s) = eps/|A| + (1 - eps) 1{a = argmax q[s]}, ties to the lowest index."""
    q = np.atleast_2d(np.asarray(q_values, dtype=np.float64))
    if q.shape[1] == 0:
        raise ConfigurationError("empty action set")
    if not 0.0 <= epsilon <= 1.0:
        raise ConfigurationError(f"epsilon must be in [0, 1], got {epsilon}")
    n_a = q.shape[1]
    probs = np.full(q.shape, epsilon / n_a)
    probs[np.arange(q.shape[0]), np.argmax(q, axis=1)] += 1.0 - epsilon
    return TabularPolicy(probs)


def _inverse_cdf(cdf_rows, row, u):
    cdf = cdf_rows[row]
    return min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)


def _streams(seed):
    env_seq, pol_seq = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(env_seq), np.random.default_rng(pol_seq)


def sample_trajectory(mdp: TabularMdp, policy: TabularPolicy, length, seed=0, burn_in=None) -> Trajectory:
    """SARSA-chained trajectory; a_next of step t is the action of step t+1.

    The chain starts from a uniformly random state and the first
    ``burn_in`` transitions are discarded (default: see ``default_burn_in``).
    """
    if length < 1:
        raise ConfigurationError("length must be >= 1")
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigurationError("policy shape does not match the MDP")
    if burn_in is None:
        burn_in = default_burn_in(mdp, policy)
    if burn_in < 0:
        raise ConfigurationError("burn_in must be >= 0")
    total = burn_in + length
    env_rng, pol_rng = _streams(seed)
    u_env = env_rng.random(total + 1)
    u_pol = pol_rng.random(total + 1)
    p_cdf = np.cumsum(mdp.transition, axis=-1).reshape(-1, mdp.n_states)
    pi_cdf = np.cumsum(policy.probs, axis=-1)
    n_a = mdp.n_actions

    states = np.empty(total, dtype=np.int64)
    actions = np.empty(total, dtype=np.int64)
    nxt = np.empty(total, dtype=np.int64)
    nxt_a = np.empty(total, dtype=np.int64)
    s = min(int(u_env[0] * mdp.n_states), mdp.n_states - 1)
    a = _inverse_cdf(pi_cdf, s, u_pol[0])
    for t in range(total):
        s2 = _inverse_cdf(p_cdf, s * n_a + a, u_env[t + 1])
        a2 = _inverse_cdf(pi_cdf, s2, u_pol[t + 1])
        states[t], actions[t], nxt[t], nxt_a[t] = s, a, s2, a2
        s, a = s2, a2
    sl = slice(burn_in, total)
    rewards = mdp.reward[states[sl], actions[sl]]
    return Trajectory(states[sl], actions[sl], rewards, nxt[sl], nxt_a[sl], seed)


def sample_game_trajectory(game: MarkovGame, policy_pair, length, seed=0, burn_in=None) -> Trajectory:
    """Game trajectory with a1 ~ pi1(.|s), a2 ~ pi2(.|s) drawn independently."""
    if length < 1:
        raise ConfigurationError("length must be >= 1")
    pi1, pi2 = policy_pair
    if pi1.probs.shape != (game.n_states, game.n_actions_p1) or pi2.probs.shape != (game.n_states, game.n_actions_p2):
        raise ConfigurationError("policy shapes do not match the game")
    if burn_in is None:
        burn_in = default_burn_in(game, policy_pair)
    if burn_in < 0:
        raise ConfigurationError("burn_in must be >= 0")
    total = burn_in + length
    env_rng, pol_rng = _streams(seed)
    u_env = env_rng.random(total + 1)
    u_pol = pol_rng.random((total, 2))
    n1, n2, n_s = game.n_actions_p1, game.n_actions_p2, game.n_states
    p_cdf = np.cumsum(game.transition, axis=-1).reshape(-1, n_s)
    cdf1 = np.cumsum(pi1.probs, axis=-1)
    cdf2 = np.cumsum(pi2.probs, axis=-1)

    states = np.empty(total, dtype=np.int64)
    acts = np.empty((total, 2), dtype=np.int64)
    nxt = np.empty(total, dtype=np.int64)
    s = min(int(u_env[0] * n_s), n_s - 1)
    for t in range(total):
        a1 = _inverse_cdf(cdf1, s, u_pol[t, 0])
        a2 = _inverse_cdf(cdf2, s, u_pol[t, 1])
        s2 = _inverse_cdf(p_cdf, (s * n1 + a1) * n2 + a2, u_env[t + 1])
        states[t], acts[t], nxt[t] = s, (a1, a2), s2
        s = s2
    sl = slice(burn_in, total)
    rewards = game.reward[states[sl], acts[sl, 0], acts[sl, 1]]
    return Trajectory(states[sl], acts[sl], rewards, nxt[sl], None, seed)


def state_transition_matrix(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)."""
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def state_action_transition_matrix(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    """P^pi[(s,a), (s',a')] = P(s'|s,a) pi(a'|s'), lexicographic (s, a) order."""
    n = mdp.n_states * mdp.n_actions
    return (mdp.transition[:, :, :, None] * policy.probs[None, None, :, :]).reshape(n, n)


def state_distribution(env, policy) -> np.ndarray:
    """Unique stationary distribution mu of the policy-induced state chain."""
    mdp, pi = _as_mdp_and_policy(env, policy)
    p = state_transition_matrix(mdp, pi)
    n = p.shape[0]
    eig = np.linalg.eigvals(p)
    on_circle = np.abs(np.abs(eig) - 1.0) < 1e-10
    unit = np.abs(eig - 1.0) < 1e-10
    if unit.sum() != 1:
        raise DiagnosticsError(
            f"state chain is not uniquely ergodic: eigenvalue 1 has multiplicity {int(unit.sum())}"
        )
    if on_circle.sum() != 1:
        raise DiagnosticsError("state chain is periodic: extra eigenvalues on the unit circle")
    a = np.vstack([p.T - np.eye(n), np.ones((1, n))])
    b = np.zeros(n + 1)
    b[-1] = 1.0
    mu, *_ = np.linalg.lstsq(a, b, rcond=None)
    mu = np.clip(mu, 0.0, None)
    return mu / mu.sum()


def stationary_distribution(env, policy) -> np.ndarray:
    """Stationary state-action distribution mu x pi.

    Shape (S, A) for an MDP and (S, A1, A2) for a game with a policy pair.
    """
    mu = state_distribution(env, policy)
    if isinstance(env, MarkovGame):
        pi1, pi2 = policy
        return mu[:, None, None] * pi1.probs[:, :, None] * pi2.probs[:, None, :]
    return mu[:, None] * policy.probs


def mixing_profile(env, policy, horizon) -> list[tuple[int, float]]:
    """Exact sup_s TV(P(s_t | s_0 = s), mu) for t = 0..horizon."""
    mdp, pi = _as_mdp_and_policy(env, policy)
    mu = state_distribution(mdp, pi)
    p = state_transition_matrix(mdp, pi)
    pt = np.eye(p.shape[0])
    out = []
    for t in range(horizon + 1):
        out.append((t, float(0.5 * np.max(np.abs(pt - mu[None, :]).sum(axis=1)))))
        pt = pt @ p
    return out


def fit_geometric_decay(profile: Sequence[tuple[int, float]], floor=1e-13):
    """Least-squares fit of log TV = log kappa + t log rho.

    Uses the prefix of strictly positive (> ``floor``) distances.  Returns
    ``(kappa, rho, r2)`` or ``None`` when fewer than two points remain.
    """
    ts, vs = [], []
    for t, v in profile:
        if v <= floor:
            break
        ts.append(t)
        vs.append(math.log(v))
    if len(ts) < 2:
        return None
    t = np.asarray(ts, dtype=float)
    y = np.asarray(vs)
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 if ss_tot == 0 else 1.0 - np.sum(resid**2) / ss_tot
    return float(math.exp(intercept)), float(math.exp(slope)), float(r2)


def default_burn_in(env, policy, horizon=200) -> int:
    """Ten times the fitted mixing time (TV <= 1/4), or 100 without a fit."""
    try:
        profile = mixing_profile(env, policy, horizon)
    except DiagnosticsError:
        return 100
    if profile[0][1] <= 1e-13:
        return 0
    fit = fit_geometric_decay(profile)
    if fit is None:
        # TV reached zero within one step: exact mixing.
        return 10
    kappa, rho, _ = fit
    if not 0.0 < rho < 1.0:
        return 100
    t_mix = max(1, math.ceil(math.log(0.25 / kappa) / math.log(rho)))
    return 10 * t_mix
