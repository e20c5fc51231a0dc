"""Experiment orchestration: spec documents in, CSV/JSON bundles out.

A spec is one JSON or TOML document.  ``kind`` selects the pipeline:

    sweep      widths x seeds training runs, optional rate fit over T
    diagnose   spectral / structural probes
    figure1    training curves per width plus the spectrum-ratio table
    oracle     exact Q tables and the projected fixed point
    reduction  TD vs Q-learning vs minimax on single-action instances

Every numeric file in a bundle is a pure function of the spec; wall-clock
figures live only in ``timing.json``.
"""

from __future__ import annotations

import copy
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neuraltd import diagnostics as diag
from neuraltd.algorithms import Reference, Schedule, TrainConfig, load_config_document, train
from neuraltd.env import (
    MarkovGame,
    TabularMdp,
    TabularPolicy,
    Trajectory,
    discretized_walk,
    epsilon_greedy,
    fit_geometric_decay,
    grid_world,
    mixing_profile,
    random_game,
    random_mdp,
    sample_trajectory,
    stationary_distribution,
    two_state_chain,
)
from neuraltd.errors import ConfigurationError, DiagnosticsError, NumericError, TrainingAborted
from neuraltd.features import FeatureMap, one_hot_features, one_hot_game_features, random_unit_features
from neuraltd.network import init_params, q_values, support_jacobian
from neuraltd.oracles import (
    exact_minimax_q,
    exact_q_pi,
    exact_q_star,
    projected_fixed_point,
    q_table_to_json,
)

KINDS = ("sweep", "diagnose", "figure1", "oracle", "reduction")
RUN_ERRORS = (TrainingAborted, NumericError, DiagnosticsError, FloatingPointError)


def _dump(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- builders

_ENV_BUILDERS = {
    "random_mdp": random_mdp,
    "random_game": random_game,
    "two_state_chain": two_state_chain,
    "grid_world": grid_world,
    "discretized_walk": discretized_walk,
}


def build_environment(doc, base_dir=Path(".")):
    """Environment from a spec entry; ``set_gamma`` rebuilds it with another discount."""
    doc = dict(doc)
    if "set_gamma" in doc:
        gamma = doc.pop("set_gamma")
        env = build_environment(doc, base_dir)
        if isinstance(env, MarkovGame):
            return MarkovGame(env.transition, env.reward, gamma)
        return TabularMdp(env.transition, env.reward, gamma, env.r_max)
    kind = doc.pop("type")
    if kind == "file":
        text = (Path(base_dir) / doc["path"]).read_text()
        raw = json.loads(text)
        return MarkovGame.from_dict(raw) if "n_actions_p2" in raw else TabularMdp.from_dict(raw)
    if kind == "inline_mdp":
        return TabularMdp.from_dict(doc)
    if kind == "inline_game":
        return MarkovGame.from_dict(doc)
    if kind not in _ENV_BUILDERS:
        raise ConfigurationError(f"unknown environment type {kind!r}")
    if "reward" in doc:
        doc["reward"] = tuple(doc["reward"])
    return _ENV_BUILDERS[kind](**doc)


def _single_policy(doc, n_states, n_actions, q=None):
    kind = doc.get("type", "uniform")
    if kind == "uniform":
        return TabularPolicy.uniform(n_states, n_actions)
    if kind == "probs":
        return TabularPolicy(np.asarray(doc["probs"], dtype=np.float64))
    if kind == "epsilon_greedy":
        if q is None:
            raise ConfigurationError("epsilon_greedy policy needs an MDP")
        return epsilon_greedy(q, doc.get("epsilon", 0.1))
    raise ConfigurationError(f"unknown policy type {kind!r}")


def build_policy(doc, env):
    """Behaviour policy; ``epsilon_greedy`` is greedy w.r.t. Q* of the MDP."""
    doc = doc or {"type": "uniform"}
    if isinstance(env, MarkovGame):
        p1 = doc.get("p1", doc)
        p2 = doc.get("p2", doc)
        return (_single_policy(p1, env.n_states, env.n_actions_p1),
                _single_policy(p2, env.n_states, env.n_actions_p2))
    q = exact_q_star(env) if doc.get("type") == "epsilon_greedy" else None
    return _single_policy(doc, env.n_states, env.n_actions, q)


def build_features(doc, env) -> FeatureMap:
    doc = dict(doc or {"type": "one_hot"})
    kind = doc.get("type", "one_hot")
    game = isinstance(env, MarkovGame)
    shape = (env.n_actions_p1, env.n_actions_p2) if game else (env.n_actions,)
    n_pairs = env.n_states * math.prod(shape)
    if kind == "one_hot":
        fm = one_hot_game_features(env.n_states, *shape) if game else one_hot_features(env.n_states, *shape)
    elif kind == "random_unit":
        fm = random_unit_features(n_pairs, doc["d"], seed=doc.get("seed", 0),
                                  min_angle=math.radians(doc.get("min_angle_deg", 1.0)), action_shape=shape)
    elif kind == "rows":
        fm = FeatureMap(np.asarray(doc["rows"], dtype=np.float64), "custom", shape)
    else:
        raise ConfigurationError(f"unknown feature type {kind!r}")
    dups = doc.get("duplicate_rows", [])
    if dups:
        table = fm.table.copy()
        for dst, src in dups:
            table[dst] = table[src]
        fm = FeatureMap(table, fm.kind, shape)
    if fm.n_rows != n_pairs:
        raise ConfigurationError(f"features cover {fm.n_rows} rows, environment has {n_pairs} pairs")
    return fm


# ------------------------------------------------------------------- specs

@dataclass
class ExperimentSpec:
    name: str
    kind: str
    environment: dict
    policy: dict = field(default_factory=lambda: {"type": "uniform"})
    features: dict = field(default_factory=lambda: {"type": "one_hot"})
    network: dict = field(default_factory=lambda: {"depth": 2, "width": 64, "activation": "elu"})
    train: dict = field(default_factory=dict)
    reference: str | None = None
    sweep: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    output: str = "results"
    base_dir: str = "."

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for key in ("widths", "seeds", "T"):
            if key in self.sweep and len(self.sweep[key]) == 0:
                raise ConfigurationError(f"sweep axis {key!r} is empty")
        env_doc = self.environment
        if env_doc.get("type") == "file" and not (Path(self.base_dir) / env_doc["path"]).exists():
            raise ConfigurationError(f"environment file {env_doc['path']!r} not found")

    @property
    def widths(self) -> list:
        return list(self.sweep.get("widths", [self.network.get("width", 64)]))

    @property
    def seeds(self) -> list:
        return list(self.sweep.get("seeds", [self.train.get("seed", 0)]))

    def to_dict(self) -> dict:
        doc = {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}
        doc.pop("base_dir")
        return doc

    @classmethod
    def from_dict(cls, doc, base_dir=".") -> "ExperimentSpec":
        doc = dict(doc)
        extra = set(doc) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigurationError(f"unknown spec keys: {sorted(extra)}")
        doc.setdefault("base_dir", str(base_dir))
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        return cls.from_dict(load_config_document(path), base_dir=path.parent)


@dataclass
class ResultBundle:
    spec: dict
    out_dir: Path
    summary: dict
    run_csvs: list
    failures: list
    timing: dict

    @property
    def ok(self) -> bool:
        return not self.failures


# ------------------------------------------------------------------ sweeps

@dataclass
class _Context:
    spec: ExperimentSpec
    env: object
    policy: object
    features: FeatureMap
    weights: np.ndarray


def _context(spec) -> _Context:
    env = build_environment(spec.environment, spec.base_dir)
    policy = build_policy(spec.policy, env)
    fm = build_features(spec.features, env)
    weights = stationary_distribution(env, policy).ravel()
    return _Context(spec, env, policy, fm, weights)


def _init(spec, width, seed, in_dim):
    net = spec.network
    return init_params(net.get("depth", 2), width, in_dim, seed=seed, activation=net.get("activation", "elu"),
                       scaling=net.get("scaling", "ntk"))


def _reference_target(ctx, params, algorithm, which, order):
    env, pol = ctx.env, ctx.policy
    if which == "fixed_point":
        return projected_fixed_point(params, ctx.features, env, pol, 1.0).q_hat
    if which == "q_pi":
        return exact_q_pi(env, pol).ravel()
    if which == "q_star":
        return exact_q_star(env, 1e-12).ravel()
    if which == "minimax":
        return exact_minimax_q(env, 1e-12, order).ravel()
    raise ConfigurationError(f"unknown reference {which!r}")


def _default_reference(algorithm):
    return {"td": "fixed_point", "q": "q_star", "minimax": "minimax"}[algorithm]


def _min_norm_offset(params, fm, target, weights):
    """||delta|| of the weighted least-squares fit q0 + J delta ~ target."""
    sup = weights > 0
    q0, jac = support_jacobian(params, fm.table[sup])
    sw = np.sqrt(weights[sup])
    delta, *_ = np.linalg.lstsq(sw[:, None] * jac, sw * (target[sup] - q0), rcond=None)
    return float(np.linalg.norm(delta))


def _resolve_train(ctx, params, seed, T_list):
    """TrainConfig with 'auto' lambda0 / omega filled in, plus the reference."""
    doc = copy.deepcopy(ctx.spec.train)
    doc.pop("omega_factor", None)
    algorithm = TrainConfig(algorithm=doc.get("algorithm", "td")).algorithm
    order = doc.get("minimax_order", "maxmin")
    which = ctx.spec.reference or _default_reference(algorithm)
    target = _reference_target(ctx, params, algorithm, which, order)
    sched = dict(doc.get("schedule", {"kind": "constant", "eta0": 0.01}))
    if sched.get("lambda0") == "auto":
        sched["lambda0"] = diag.estimate_sigma(params, ctx.features, ctx.weights).lambda0
    doc["schedule"] = Schedule(**sched)
    if doc.get("omega", "auto") == "auto":
        factor = ctx.spec.train.get("omega_factor", 2.0)
        doc["omega"] = factor * max(_min_norm_offset(params, ctx.features, target, ctx.weights), 1e-3)
    doc["seed"] = seed
    if T_list:
        doc["T"] = max(T_list)
        doc["log_at"] = sorted(set(doc.get("log_at", [])) | set(T_list))
    return TrainConfig.from_dict(doc), Reference(target, ctx.weights), which


def _one_run(ctx, width, seed, T_list, run_dir):
    params, _ = _init(ctx.spec, width, seed, ctx.features.dim)
    name = f"m{width}_s{seed}"
    entry = {"width": width, "seed": seed, "csv": f"runs/{name}.csv"}
    try:
        cfg, ref, which = _resolve_train(ctx, params, seed, T_list)
        final, rec = train(ctx.env, ctx.policy, ctx.features, params, cfg, ref)
    except RUN_ERRORS as exc:
        entry.update(status="failed", error=str(exc))
        return entry, None
    rec.write(run_dir / f"{name}.csv")
    errs = dict(zip(rec.t, rec.q_eval_error))
    entry.update(
        status="ok",
        reference=which,
        omega=cfg.omega,
        lambda0=cfg.schedule.lambda0,
        initial_error=errs[0],
        final_error=rec.q_eval_error[-1],
        errors_at_T={str(t): errs[t] for t in (T_list or [])},
        final_theta_dist=rec.theta_dist[-1],
        projection_hits=int(sum(rec.projection_hit)),
    )
    if isinstance(ctx.env, TabularMdp) and cfg.algorithm == "td":
        entry.update(_td_decomposition(ctx, params, final))
    return entry, rec


def _td_decomposition(ctx, params, final):
    """Errors of the final network against Q^pi and against Q_hat(theta*), plus its linearization gap."""
    table = ctx.features.table
    w = ctx.weights
    q_fin = q_values(final, table)
    q_pi = exact_q_pi(ctx.env, ctx.policy).ravel()
    fp = projected_fixed_point(params, ctx.features, ctx.env, ctx.policy, 1.0)
    q0, jac = support_jacobian(params, table)
    q_lin = q0 + jac @ (final.theta - params.theta)
    return {
        "error_vs_q_pi": float(np.sum(w * (q_fin - q_pi) ** 2)),
        "error_vs_fixed_point": float(np.sum(w * (q_fin - fp.q_hat) ** 2)),
        "linearization_gap": float(np.sum(w * (q_fin - q_lin) ** 2)),
        "fixed_point_vs_q_pi": float(np.max(np.abs(fp.q_hat - q_pi))),
        "fixed_point_delta_norm": fp.delta_norm,
    }


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _rate_fits(runs, T_list):
    out = {}
    for width in sorted({r["width"] for r in runs}):
        ok = [r for r in runs if r["width"] == width and r["status"] == "ok"]
        if not ok:
            continue
        means = [float(np.mean([r["errors_at_T"][str(t)] for r in ok])) for t in T_list]
        entry = {"T": list(T_list), "mean_error": means, "n_seeds": len(ok)}
        try:
            entry["slope"], entry["intercept"], entry["r2"] = diag.fit_rate_slope(zip(T_list, means))
        except DiagnosticsError as exc:
            entry["fit_error"] = str(exc)
        out[str(width)] = entry
    return out


def _run_sweep(ctx, out_dir, threads):
    spec = ctx.spec
    run_dir = out_dir / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    T_list = sorted(spec.sweep.get("T", []))
    jobs = [(m, s) for m in spec.widths for s in spec.seeds]
    results = _map(lambda job: _one_run(ctx, job[0], job[1], T_list, run_dir), jobs, threads)
    runs = [entry for entry, _ in results]
    summary = {"runs": runs}
    if len(T_list) >= 3:
        summary["rate"] = _rate_fits(runs, T_list)
    return summary, [r["csv"] for r in runs if r["status"] == "ok"], [r for r in runs if r["status"] != "ok"]


# ------------------------------------------------------------- diagnostics

def _run_diagnose(ctx, out_dir, threads):
    spec, probes = ctx.spec, ctx.spec.diagnostics
    summary, failures = {}, []
    depth = spec.network.get("depth", 2)
    act = spec.network.get("activation", "elu")
    seeds = spec.seeds

    def attempt(name, fn):
        try:
            summary[name] = fn()
        except RUN_ERRORS as exc:
            failures.append({"probe": name, "error": str(exc)})

    if probes.get("gradient"):
        g = probes["gradient"]
        attempt("gradient", lambda: diag.gradient_check(g.get("depths", [1, 2, 3]), g.get("widths", [4, 32]),
                                                   g.get("activations", ["elu", "gelu", "sigmoid"]),
                                                   g.get("n_samples", 50), g.get("d", 3), seeds[0]))

    if probes.get("spectrum"):
        def spectrum():
            reports = diag.spectrum_sweep(spec.widths, len(seeds), ctx.env, ctx.policy, ctx.features,
                                          seed=seeds[0], depth=depth, activation=act)
            (out_dir / "spectrum.csv").write_text(diag.spectrum_reports_csv(reports))
            return [r.to_dict() for r in reports]
        attempt("spectrum", spectrum)

    params, _ = _init(spec, spec.widths[0], seeds[0], ctx.features.dim)
    if probes.get("kernel"):
        def kernel():
            sig = diag.estimate_sigma(params, ctx.features, ctx.weights)
            viol = diag.kernel_orthogonality_check(sig, params, ctx.features)
            return {"violation": viol, "sigma_max": sig.sigma_max, "rank": sig.rank, "n": sig.n,
                    "bound": 1e-6 * math.sqrt(sig.sigma_max)}
        attempt("kernel", kernel)

    if probes.get("contraction"):
        trials = probes.get("contraction_trials", 100)
        attempt("contraction", lambda: {
            "max_ratio": diag.contraction_check(ctx.env, ctx.policy, trials, seeds[0]),
            "gamma": ctx.env.gamma,
        })

    if probes.get("mixing"):
        def mixing():
            profile = mixing_profile(ctx.env, ctx.policy, probes.get("mixing_horizon", 50))
            fit = fit_geometric_decay(profile)
            doc = {"profile": [v for _, v in profile]}
            if fit is not None:
                doc.update(kappa=fit[0], rho=fit[1], r2=fit[2])
            return doc
        attempt("mixing", mixing)

    if probes.get("regularity"):
        def regularity():
            rng = np.random.default_rng(seeds[0])
            omega = probes.get("regularity_omega", 1.0)
            nu = probes.get("regularity_nu", 0.5)
            n = params.n
            samples = [params.theta + omega * v / np.linalg.norm(v)
                       for v in rng.standard_normal((probes.get("regularity_samples", 5), n))]
            if isinstance(ctx.env, MarkovGame):
                pairs = list(zip(samples, samples[1:] + samples[:1])) + [(samples[0], samples[0])]
                rep = diag.regularity_probe_minimax(params, ctx.features, ctx.env, ctx.policy, pairs, nu=nu)
            else:
                rep = diag.regularity_probe_q(params, ctx.features, ctx.env, ctx.policy, samples, nu=nu)
            lam0 = diag.estimate_sigma(params, ctx.features, ctx.weights).lambda0
            return {"nu": rep.nu, "min_eigenvalue": rep.min_eigenvalue, "nu_max": rep.nu_max, "lambda0": lam0,
                    "gamma": ctx.env.gamma}
        attempt("regularity", regularity)

    if probes.get("gap"):
        g = probes["gap"]
        def gap():
            per_seed = [diag.linearization_gap_scan(depth, g.get("d", 4), g["widths"], g.get("omega", 1.0),
                                                    g.get("n_theta", 2), g.get("n_x", 2), seed=s,
                                                    activation=act).max_gap for s in seeds]
            mean = np.mean(per_seed, axis=0)
            return {"widths": g["widths"], "per_seed": [list(p) for p in per_seed], "mean_gap": mean.tolist(),
                    "ratio": float(mean[0] / mean[-1])}
        attempt("gap", gap)

    if probes.get("fixed_point"):
        attempt("fixed_point", lambda: projected_fixed_point(
            params, ctx.features, ctx.env, ctx.policy, probes.get("omega", 1.0)).to_dict())

    return summary, [], failures


# ------------------------------------------------------------------ others

def _run_oracle(ctx, out_dir, threads):
    env, pol = ctx.env, ctx.policy
    summary = {"gamma": env.gamma}
    if isinstance(env, MarkovGame):
        tables = {"q_pi": exact_q_pi(env, pol)}
        for order in ("maxmin", "minmax"):
            tables[f"minimax_{order}"] = exact_minimax_q(env, 1e-12, order)
    else:
        tables = {"q_pi": exact_q_pi(env, pol), "q_star": exact_q_star(env, 1e-12)}
    for name, q in tables.items():
        (out_dir / f"{name}.json").write_text(q_table_to_json(q) + "\n")
        summary[name] = q.tolist()
    params, _ = _init(ctx.spec, ctx.spec.widths[0], ctx.spec.seeds[0], ctx.features.dim)
    try:
        fp = projected_fixed_point(params, ctx.features, env, pol, ctx.spec.train.get("omega", 1.0)
                                   if ctx.spec.train.get("omega", "auto") != "auto" else 1.0)
        summary["fixed_point"] = fp.to_dict()
    except RUN_ERRORS as exc:
        return summary, [], [{"probe": "fixed_point", "error": str(exc)}]
    return summary, [], []


def _degenerate_pair(env):
    """Single-action MDP and the matching 1x1 game, from whichever was given."""
    if isinstance(env, MarkovGame):
        if env.n_actions_p1 != 1 or env.n_actions_p2 != 1:
            raise ConfigurationError("reduction needs 1x1 action sets")
        return env.as_joint_mdp(), env
    if env.n_actions != 1:
        raise ConfigurationError("reduction needs a single-action MDP")
    game = MarkovGame(env.transition[:, :, None, :], env.reward[:, :, None], env.gamma)
    return env, game


def _run_reduction(ctx, out_dir, threads):
    spec = ctx.spec
    mdp, game = _degenerate_pair(ctx.env)
    pi = TabularPolicy.uniform(mdp.n_states, 1)
    fm_mdp = one_hot_features(mdp.n_states, 1) if spec.features.get("type", "one_hot") == "one_hot" \
        else build_features(spec.features, mdp)
    fm_game = fm_mdp.with_action_shape(1, 1)
    run_dir = out_dir / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = copy.deepcopy(spec.train)
    doc.pop("omega_factor", None)
    doc["schedule"] = Schedule(**doc.get("schedule", {"kind": "constant", "eta0": 0.05}))
    runs = []
    for seed in spec.seeds:
        params, _ = _init(spec, spec.widths[0], seed, fm_mdp.dim)
        texts, thetas = {}, {}
        for alg, env, pol, fm in (("td", mdp, pi, fm_mdp), ("q", mdp, pi, fm_mdp),
                                  ("minimax", game, (pi, pi), fm_game)):
            cfg = TrainConfig.from_dict({**doc, "algorithm": alg, "seed": seed})
            final, rec = train(env, pol, fm, params, cfg)
            rec.write(run_dir / f"{alg}_s{seed}.csv")
            texts[alg] = rec.csv_text()
            thetas[alg] = final.theta
        runs.append({
            "seed": seed,
            "csv_identical": texts["td"] == texts["q"] == texts["minimax"],
            "theta_identical": bool(np.array_equal(thetas["td"], thetas["q"])
                                    and np.array_equal(thetas["td"], thetas["minimax"])),
        })
    return {"runs": runs}, [f"runs/{a}_s{s}.csv" for s in spec.seeds for a in ("td", "q", "minimax")], []


def _cycled_trajectory(traj, epochs):
    # Replays the sample; the state chain breaks once at each wrap.
    def tile(a):
        return None if a is None else np.concatenate([a] * epochs)

    return Trajectory(tile(traj.states), tile(traj.actions), tile(traj.rewards), tile(traj.next_states),
                      tile(traj.next_actions), traj.seed)


def _run_figure1(ctx, out_dir, threads):
    """Training curves per width and the sigma ratio table."""
    spec = ctx.spec
    fig = spec.sweep
    n_samples = fig.get("n_samples", 2000)
    epochs = fig.get("epochs", 2)
    tail = fig.get("tail_fraction", 0.1)
    doc = copy.deepcopy(spec.train)
    doc.pop("omega_factor", None)
    doc["schedule"] = Schedule(**doc.get("schedule", {"kind": "constant", "eta0": 0.05}))
    doc.setdefault("omega", 100.0)
    run_dir = out_dir / "runs"
    run_dir.mkdir(parents=True, exist_ok=True)
    env, pol, fm = ctx.env, ctx.policy, ctx.features
    if isinstance(env, MarkovGame):
        raise ConfigurationError("figure1 runs policy evaluation on an MDP")
    jobs = [(m, s) for m in spec.widths for s in spec.seeds]

    def job(ms):
        m, s = ms
        traj = _cycled_trajectory(sample_trajectory(env, pol, n_samples, seed=s), epochs)
        T = len(traj)
        cfg = TrainConfig.from_dict({**doc, "algorithm": "td", "seed": s, "T": T})
        params, _ = _init(spec, m, s, fm.dim)
        try:
            _, rec = train(env, pol, fm, params, cfg, trajectory=traj)
        except RUN_ERRORS as exc:
            return {"width": m, "seed": s, "status": "failed", "error": str(exc)}, None
        name = f"m{m}_s{s}"
        rec.write(run_dir / f"{name}.csv")
        curve = rec.td_sq_window[1:]
        k = max(1, int(math.ceil(tail * len(curve))))
        return {"width": m, "seed": s, "status": "ok", "csv": f"runs/{name}.csv",
                "tail_td_sq": float(np.mean(curve[-k:])), "mean_td_sq": float(np.mean(curve))}, rec

    results = _map(job, jobs, threads)
    runs = [r for r, _ in results]
    lines = ["m,seed,t,td_sq_mean"]
    for (entry, rec) in results:
        if rec is None:
            continue
        for t, v in zip(rec.t[1:], rec.td_sq_window[1:]):
            lines.append(f"{entry['width']},{entry['seed']},{t},{v!r}")
    (out_dir / "curves.csv").write_text("\n".join(lines) + "\n")
    def per_width(key):
        out = []
        for m in spec.widths:
            vals = [r[key] for r in runs if r["width"] == m and r["status"] == "ok"]
            out.append(float(np.mean(vals)) if vals else math.nan)
        return out

    tails = per_width("tail_td_sq")
    means = per_width("mean_td_sq")
    inversions = sum(1 for a, b in zip(tails, tails[1:]) if b > a)
    reports = diag.spectrum_sweep(spec.widths, len(spec.seeds), env, pol, fm, seed=spec.seeds[0],
                                  depth=spec.network.get("depth", 2),
                                  activation=spec.network.get("activation", "elu"))
    (out_dir / "spectrum.csv").write_text(diag.spectrum_reports_csv(reports))
    summary = {"runs": runs, "tail_td_sq": dict(zip(map(str, spec.widths), tails)),
               "mean_td_sq": dict(zip(map(str, spec.widths), means)),
               "tail_inversions": inversions, "spectrum": [r.to_dict() for r in reports]}
    failures = [r for r in runs if r["status"] != "ok"]
    return summary, [r["csv"] for r in runs if r["status"] == "ok"], failures


_PIPELINES = {
    "sweep": _run_sweep,
    "diagnose": _run_diagnose,
    "oracle": _run_oracle,
    "reduction": _run_reduction,
    "figure1": _run_figure1,
}


def run_experiment(spec: ExperimentSpec, out_dir=None, threads=1) -> ResultBundle:
    """Execute ``spec`` and write its bundle under ``out_dir`` (default spec.output)."""
    out_dir = Path(out_dir if out_dir is not None else spec.output)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigurationError(f"output directory {out_dir} is not writable: {exc}") from None
    start = time.perf_counter()
    ctx = _context(spec)
    summary, csvs, failures = _PIPELINES[spec.kind](ctx, out_dir, threads)
    summary = {"name": spec.name, "kind": spec.kind, **summary, "failures": failures}
    elapsed = time.perf_counter() - start
    snapshot = spec.to_dict()
    (out_dir / "spec.json").write_text(_dump(snapshot))
    (out_dir / "summary.json").write_text(_dump(_jsonable(summary)))
    timing = {"wall_seconds": elapsed, "threads": threads}
    (out_dir / "timing.json").write_text(_dump(timing))
    return ResultBundle(snapshot, out_dir, summary, csvs, failures, timing)


def replicate_figure1(env_spec, widths, seeds, out_dir, network=None, train=None, sweep=None,
                      features=None, policy=None, threads=1) -> ResultBundle:
    """Curves per width plus the ratio table, from an environment document."""
    spec = ExperimentSpec(
        name="figure1",
        kind="figure1",
        environment=env_spec,
        policy=policy or {"type": "epsilon_greedy", "epsilon": 0.1},
        features=features or {"type": "one_hot"},
        network=network or {"depth": 2, "activation": "elu"},
        train=train or {"schedule": {"kind": "constant", "eta0": 0.05}, "eval_every": 500},
        sweep={**(sweep or {}), "widths": list(widths), "seeds": list(seeds)},
        output=str(out_dir),
    )
    if list(widths) != sorted(widths):
        raise ConfigurationError("widths must be ascending")
    return run_experiment(spec, out_dir, threads)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj
