"""Projected stochastic semi-gradient learners.

One recursion drives all three algorithms:

    theta <- Proj_ball(theta - eta_t * Delta_t * grad Q(x_t; theta)),

and only the bootstrapped target inside Delta_t changes: the next pair's
value for policy evaluation (TD), the greedy value for Q-learning, and the
pure-strategy game value for minimax Q-learning.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from neuraltd.env import (
    MarkovGame,
    TabularMdp,
    joint_policy,
    sample_game_trajectory,
    sample_trajectory,
)
from neuraltd.errors import ConfigurationError, TrainingAborted
from neuraltd.features import FeatureMap
from neuraltd.network import BallConstraint, NetworkParams, project_ball, q_values, value_and_grad
from neuraltd.oracles import ORDERS, backup_value

ALGORITHMS = ("td", "q", "minimax")
_ALIASES = {"td": "td", "q": "q", "qlearning": "q", "minimax": "minimax", "minimaxq": "minimax"}
CSV_HEADER = ("t", "td_error", "theta_dist", "q_eval_error", "projection_hit")


def _canonical_algorithm(name) -> str:
    key = str(name).lower().replace("-", "").replace("_", "")
    if key not in _ALIASES:
        raise ConfigurationError(f"unknown algorithm {name!r}; choose from {ALGORITHMS}")
    return _ALIASES[key]


@dataclass(frozen=True)
class Schedule:
    """Step-size rule.

    ``theorem``: 1 / (2 (1 - gamma) lambda0 (t + 1)) for TD and
    1 / (2 nu lambda0 (t + 1)) for Q / minimax (nu defaults to 1 - gamma).
    ``constant``: eta0 at every step.
    """

    kind: str = "theorem"
    lambda0: float | None = None
    nu: float | None = None
    eta0: float | None = None
    algorithm: str = "td"
    gamma: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "algorithm", _canonical_algorithm(self.algorithm))
        if self.kind not in ("theorem", "constant"):
            raise ConfigurationError(f"schedule kind must be 'theorem' or 'constant', got {self.kind!r}")
        if self.kind == "constant":
            if self.eta0 is None or not self.eta0 > 0:
                raise ConfigurationError("constant schedule needs eta0 > 0")
            return
        if self.lambda0 is None or not self.lambda0 > 0:
            raise ConfigurationError("theorem schedule needs lambda0 > 0")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            raise ConfigurationError(f"gamma must lie in [0, 1), got {self.gamma}")
        if self.nu is not None and not 0.0 < self.nu:
            raise ConfigurationError("nu must be > 0")

    def resolved_nu(self) -> float | None:
        if self.kind != "theorem" or self.algorithm == "td":
            return None
        return 1.0 - self.gamma if self.nu is None else self.nu


def step_size(schedule: Schedule, t) -> float:
    if t < 0:
        raise ConfigurationError("t must be >= 0")
    if schedule.kind == "constant":
        return float(schedule.eta0)
    if schedule.gamma is None and (schedule.algorithm == "td" or schedule.nu is None):
        raise ConfigurationError("theorem schedule needs gamma")
    if schedule.algorithm == "td":
        return 1.0 / (2.0 * (1.0 - schedule.gamma) * schedule.lambda0 * (t + 1))
    return 1.0 / (2.0 * schedule.resolved_nu() * schedule.lambda0 * (t + 1))


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines one training run besides the environment."""

    algorithm: str = "td"
    omega: float = 1.0
    T: int = 1000
    schedule: Schedule = field(default_factory=lambda: Schedule("constant", eta0=0.01))
    gamma: float | None = None
    seed: int = 0
    burn_in: int | None = None
    eval_every: int = 100
    minimax_order: str = "maxmin"
    log_at: tuple = ()
    snapshot_at: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "algorithm", _canonical_algorithm(self.algorithm))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", Schedule(**self.schedule))
        if self.T < 0:
            raise ConfigurationError("T must be >= 0")
        if not self.omega > 0:
            raise ConfigurationError("omega must be > 0")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        if self.burn_in is not None and self.burn_in < 0:
            raise ConfigurationError("burn_in must be >= 0")
        if self.minimax_order not in ORDERS:
            raise ConfigurationError(f"minimax_order must be one of {ORDERS}")
        object.__setattr__(self, "log_at", tuple(int(t) for t in self.log_at))
        object.__setattr__(self, "snapshot_at", tuple(int(t) for t in self.snapshot_at))

    def resolve(self, gamma) -> "TrainConfig":
        """Fill in gamma and tie the schedule to this algorithm."""
        gamma = self.gamma if self.gamma is not None else gamma
        sched = replace(self.schedule, algorithm=self.algorithm, gamma=gamma)
        return replace(self, gamma=gamma, schedule=sched)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["log_at"] = list(self.log_at)
        doc["snapshot_at"] = list(self.snapshot_at)
        return doc

    @classmethod
    def from_dict(cls, doc) -> "TrainConfig":
        doc = dict(doc)
        known = {f for f in cls.__dataclass_fields__}
        extra = set(doc) - known
        if extra:
            raise ConfigurationError(f"unknown TrainConfig keys: {sorted(extra)}")
        if "schedule" in doc and isinstance(doc["schedule"], dict):
            doc["schedule"] = Schedule(**doc["schedule"])
        return cls(**doc)


def load_config_document(path) -> dict:
    """Read a JSON or TOML document (chosen by file extension)."""
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


@dataclass(frozen=True)
class Reference:
    """Target values over every feature row, weighted for the evaluation error."""

    target: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.target, dtype=np.float64).ravel()
        w = np.asarray(self.weights, dtype=np.float64).ravel()
        if t.shape != w.shape:
            raise ConfigurationError("target and weights must have the same size")
        object.__setattr__(self, "target", t)
        object.__setattr__(self, "weights", w)

    def error(self, params, features, theta=None) -> float:
        q = q_values(params, features, theta)
        return float(np.sum(self.weights * (q - self.target) ** 2))


@dataclass
class RunRecord:
    """Logged telemetry of one run.

    Row t reports the TD error and projection flag of the update that
    produced theta^t (nan / 0 at t = 0) together with ||theta^t - theta0||
    and the weighted evaluation error of theta^t.
    """

    t: list = field(default_factory=list)
    td_error: list = field(default_factory=list)
    theta_dist: list = field(default_factory=list)
    q_eval_error: list = field(default_factory=list)
    projection_hit: list = field(default_factory=list)
    td_sq_window: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    checkpoint: str | None = None

    def rows(self):
        return zip(self.t, self.td_error, self.theta_dist, self.q_eval_error, self.projection_hit)

    def csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for t, td, dist, err, hit in self.rows():
            w.writerow([t, repr(float(td)), repr(float(dist)), repr(float(err)), int(hit)])
        return buf.getvalue()

    def write(self, csv_path) -> Path:
        """Write the CSV and a JSON sidecar of the resolved config next to it."""
        csv_path = Path(csv_path)
        csv_path.write_text(self.csv_text())
        sidecar = csv_path.with_suffix(".json")
        doc = {"config": self.config, "checkpoint": self.checkpoint}
        sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return sidecar

    @classmethod
    def read_csv(cls, path) -> "RunRecord":
        rec = cls()
        with open(path) as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != CSV_HEADER:
                raise ConfigurationError(f"{path}: unexpected CSV header")
            for t, td, dist, err, hit in reader:
                rec.t.append(int(t))
                rec.td_error.append(float(td))
                rec.theta_dist.append(float(dist))
                rec.q_eval_error.append(float(err))
                rec.projection_hit.append(int(hit))
        return rec


def _next_value_td(params, phi_next, theta):
    # batched path so |A| = 1 Q-learning and minimax see identical bits
    return float(q_values(params, phi_next[None, :], theta)[0])


def td_error_policy_eval(params: NetworkParams, phi_t, phi_t1, r_t, gamma, theta=None) -> float:
    """Q(x_t) - (r_t + gamma Q(x_{t+1}))."""
    q_t = q_values(params, np.asarray(phi_t, dtype=np.float64), theta)
    return q_t - (r_t + gamma * _next_value_td(params, np.asarray(phi_t1, dtype=np.float64), theta))


def td_error_optimality(params: NetworkParams, feature_map: FeatureMap, s_t, a_t, r_t, s_next, gamma,
                        theta=None) -> float:
    """Q(s_t, a_t) - (r_t + gamma max_b Q(s_next, b))."""
    q_t = q_values(params, feature_map(feature_map.pair_index(s_t, a_t)), theta)
    nxt = q_values(params, feature_map.state_block(s_next), theta)
    return q_t - (r_t + gamma * float(nxt.max()))


def td_error_minimax(params: NetworkParams, feature_map: FeatureMap, s_t, a1, a2, r_t, s_next, gamma,
                     theta=None, order="maxmin") -> float:
    """Q(s_t, a1, a2) - (r_t + gamma * value of the next-state Q matrix)."""
    n1, n2 = feature_map._actions()
    q_t = q_values(params, feature_map(feature_map.pair_index(s_t, a1, a2)), theta)
    nxt = q_values(params, feature_map.state_block(s_next), theta).reshape(n1, n2)
    return q_t - (r_t + gamma * float(backup_value(nxt, order)))


def apply_step(theta, grad, delta, eta, out=None):
    """theta - eta * (delta * grad); ``grad`` is overwritten with the direction."""
    direction = np.multiply(grad, delta, out=grad)
    step = np.multiply(direction, eta, out=out)
    return np.subtract(theta, step, out=step)


def _log_points(config):
    pts = set(range(0, config.T + 1, config.eval_every))
    pts.add(config.T)
    pts.update(t for t in config.log_at if 0 <= t <= config.T)
    return pts


def train(env, policy, feature_map: FeatureMap, net_init: NetworkParams, config: TrainConfig,
          reference: Reference | None = None, trajectory=None):
    """Run the projected semi-gradient recursion for ``config.T`` steps.

    ``policy`` is the behaviour policy (a pair for games).  TD on a game
    runs on its joint-action MDP.  Returns ``(final params, RunRecord)``.
    """
    alg = config.algorithm
    if isinstance(env, MarkovGame) and alg == "td":
        env, policy = env.as_joint_mdp(), joint_policy(*policy)
    if alg == "minimax" and not isinstance(env, MarkovGame):
        raise ConfigurationError("minimax Q-learning needs a MarkovGame")
    if alg != "minimax" and not isinstance(env, TabularMdp):
        raise ConfigurationError(f"{alg} needs a TabularMdp")
    cfg = config.resolve(env.gamma)
    gamma = cfg.gamma
    if isinstance(env, MarkovGame):
        n1, n2 = env.n_actions_p1, env.n_actions_p2
        k = n1 * n2
    else:
        n1, n2 = env.n_actions, 1
        k = n1
    table = feature_map.table
    if table.shape[0] != env.n_states * k:
        raise ConfigurationError(f"feature map has {table.shape[0]} rows, environment has {env.n_states * k} pairs")
    if table.shape[1] != net_init.in_dim:
        raise ConfigurationError("feature dimension does not match the network input")
    if reference is not None and reference.target.size != table.shape[0]:
        raise ConfigurationError("reference must cover every feature row")

    if trajectory is None and cfg.T > 0:
        if isinstance(env, MarkovGame):
            trajectory = sample_game_trajectory(env, policy, cfg.T, cfg.seed, cfg.burn_in)
        else:
            trajectory = sample_trajectory(env, policy, cfg.T, cfg.seed, cfg.burn_in)
    if cfg.T > 0 and len(trajectory) < cfg.T:
        raise ConfigurationError("trajectory shorter than T")

    theta0 = net_init.theta
    ball = BallConstraint(theta0, cfg.omega)
    theta = theta0.copy()
    log_pts = _log_points(cfg)
    snap_pts = set(cfg.snapshot_at)
    rec = RunRecord(config=cfg.to_dict())
    rec.config["schedule"]["nu_resolved"] = cfg.schedule.resolved_nu()
    window = []

    def log(t, delta, hit):
        rec.t.append(t)
        rec.td_error.append(delta)
        rec.theta_dist.append(float(np.linalg.norm(theta - theta0)))
        rec.q_eval_error.append(math.nan if reference is None else reference.error(net_init, table, theta))
        rec.projection_hit.append(int(hit))
        rec.td_sq_window.append(float(np.mean(window)) if window else math.nan)
        window.clear()

    if 0 in log_pts:
        log(0, math.nan, False)
    if 0 in snap_pts:
        rec.snapshots[0] = theta.copy()

    if cfg.T:
        states, rewards, nxt = trajectory.states, trajectory.rewards, trajectory.next_states
        acts = trajectory.actions
        if alg == "minimax":
            rows = (states * n1 + acts[:, 0]) * n2 + acts[:, 1]
        else:
            rows = states * k + acts
        if alg == "td":
            rows_next = nxt * k + trajectory.next_actions

    # Three rotating n-vectors: current iterate, gradient / step, projection scratch.
    grad = np.empty_like(theta0)
    spare = np.empty_like(theta0)
    work = np.empty_like(theta0)
    # Divergence is detected explicitly below, so overflow warnings are noise.
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(cfg.T):
            q_t, g = value_and_grad(net_init, table[rows[t]], theta, out=grad)
            s2 = nxt[t]
            if alg == "td":
                target = _next_value_td(net_init, table[rows_next[t]], theta)
            else:
                block = q_values(net_init, table[s2 * k:(s2 + 1) * k], theta)
                if alg == "q":
                    target = float(block.max())
                else:
                    target = float(backup_value(block.reshape(n1, n2), cfg.minimax_order))
            delta = q_t - (rewards[t] + gamma * target)
            if not math.isfinite(delta):
                raise TrainingAborted(t, f"non-finite TD error {delta} (Q(x_t)={q_t}, target={target})")
            stepped = apply_step(theta, g, delta, step_size(cfg.schedule, t), out=spare)
            new = project_ball(ball, stepped, work=work)
            hit = new is not stepped
            if not math.isfinite(float(np.dot(new, new))):
                raise TrainingAborted(t, f"non-finite parameters (|Delta|={abs(delta):.3e})")
            # rotate buffers so that none of them aliases the new iterate
            if hit:
                theta, work = new, theta
            else:
                theta, spare = new, theta
            window.append(delta * delta)
            if t + 1 in log_pts:
                log(t + 1, delta, hit)
            if t + 1 in snap_pts:
                rec.snapshots[t + 1] = theta.copy()
    return net_init.with_theta(theta), rec
