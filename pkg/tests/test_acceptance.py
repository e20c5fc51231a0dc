"""The twelve acceptance criteria, run from the checked-in configs.

Each test records a PASS/FAIL line that is printed in the terminal
summary.  Run alone with ``pytest tests/test_acceptance.py -v``.
"""

from pathlib import Path

import numpy as np
import pytest

from neuraltd.diagnostics import greedy_factor_q, minimax_star_factor
from neuraltd.env import MarkovGame, random_game, state_distribution
from neuraltd.features import one_hot_features, one_hot_game_features
from neuraltd.network import init_params, support_jacobian
from neuraltd.runner import ExperimentSpec, build_environment, build_policy, run_experiment

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
ACCEPTANCE_CONFIGS = sorted(p for p in CONFIGS.glob("c*.toml"))


def _run_all(root):
    out = {}
    for path in ACCEPTANCE_CONFIGS:
        spec = ExperimentSpec.load(path)
        bundle = run_experiment(spec, root / spec.name)
        out[spec.name] = bundle
    return out


@pytest.fixture(scope="module")
def bundles(tmp_path_factory):
    return _run_all(tmp_path_factory.mktemp("acceptance"))


def _seconds(bundles, *names):
    return sum(bundles[n].timing["wall_seconds"] for n in names)


def _record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_gradient(bundles, acceptance_log):
    b = bundles["c01_gradient"]
    err = b.summary["gradient"]["max_rel_error"]
    secs = _seconds(bundles, "c01_gradient")
    _record(acceptance_log, 1, b.ok and err <= 1e-5 and secs < 10,
            f"max rel error {err:.2e} (<= 1e-5), {secs:.1f}s (< 10s)")


def test_criterion_02_gap_scaling(bundles, acceptance_log):
    b = bundles["c02_gap"]
    ratio = b.summary["gap"]["ratio"]
    secs = _seconds(bundles, "c02_gap")
    _record(acceptance_log, 2, b.ok and 2 <= ratio <= 8 and secs < 60,
            f"gap ratio m=64/m=1024 {ratio:.2f} (in [2, 8]), {secs:.1f}s (< 60s)")


def test_criterion_03_rate(bundles, acceptance_log):
    b = bundles["c03_rate"]
    fit = b.summary["rate"]["256"]
    secs = _seconds(bundles, "c03_rate")
    ok = b.ok and fit["n_seeds"] == 10 and fit["slope"] <= -0.7 and fit["r2"] >= 0.9 and secs < 300
    _record(acceptance_log, 3, ok, f"slope {fit['slope']:.3f} (<= -0.7), R2 {fit['r2']:.4f} (>= 0.9), "
                                   f"{secs:.1f}s (< 300s)")


def test_criterion_04_fixed_point(bundles, acceptance_log):
    b = bundles["c04_fixed_point"]
    runs = b.summary["runs"]
    oracle = max(r["fixed_point_vs_q_pi"] for r in runs)
    margins = [3 * r["error_vs_fixed_point"] + r["linearization_gap"] - r["error_vs_q_pi"] for r in runs]
    secs = _seconds(bundles, "c04_fixed_point")
    ok = b.ok and oracle <= 1e-8 and min(margins) >= 0 and secs < 120
    _record(acceptance_log, 4, ok, f"max |Q_hat - Q_pi| {oracle:.1e} (<= 1e-8), decomposition margin "
                                   f"{min(margins):.3e} (>= 0), {secs:.1f}s (< 120s)")


def test_criterion_05_contraction(bundles, acceptance_log):
    names = ["c05a_contraction", "c05b_contraction", "c05c_contraction"]
    slack = [bundles[n].summary["contraction"]["gamma"] + 1e-10 - bundles[n].summary["contraction"]["max_ratio"]
             for n in names]
    secs = _seconds(bundles, *names)
    ok = all(bundles[n].ok for n in names) and min(slack) >= 0 and secs < 5
    _record(acceptance_log, 5, ok, f"min (gamma - ratio) {min(slack):.3e} over 3 instances x 100 pairs, "
                                   f"{secs:.2f}s (< 5s)")


def test_criterion_06_kernel(bundles, acceptance_log):
    b = bundles["c06_kernel"]
    k = b.summary["kernel"]
    secs = _seconds(bundles, "c06_kernel")
    ok = b.ok and k["rank"] < k["n"] and k["violation"] <= k["bound"] and secs < 10
    _record(acceptance_log, 6, ok, f"violation {k['violation']:.1e} (<= {k['bound']:.1e}), rank {k['rank']} "
                                   f"of {k['n']}, {secs:.2f}s (< 10s)")


def test_criterion_07_spectrum_plateau(bundles, acceptance_log):
    names = ["c07a_spectrum", "c07b_spectrum"]
    gaps = []
    for n in names:
        r = {row["m"]: row["ratio"] for row in bundles[n].summary["spectrum"]}
        gaps.append(abs(r[512] - r[1024]) / r[1024])
    secs = _seconds(bundles, *names)
    ok = all(bundles[n].ok for n in names) and max(gaps) <= 0.25 and secs < 180
    _record(acceptance_log, 7, ok, f"|r512 - r1024| / r1024 = {', '.join(f'{g:.3f}' for g in gaps)} "
                                   f"(<= 0.25), {secs:.1f}s (< 180s)")


def test_criterion_08_reductions(bundles, acceptance_log):
    b = bundles["c08_reduction"]
    runs = b.summary["runs"]
    ok = b.ok and all(r["csv_identical"] and r["theta_identical"] for r in runs)
    secs = _seconds(bundles, "c08_reduction")
    _record(acceptance_log, 8, ok and secs < 30,
            f"{sum(r['csv_identical'] and r['theta_identical'] for r in runs)}/{len(runs)} seeds bitwise "
            f"identical across TD / Q / minimax, {secs:.1f}s (< 30s)")


def test_criterion_09_minimax(bundles, acceptance_log):
    b = bundles["c09_minimax"]
    fit = b.summary["rate"]["256"]
    errs = fit["mean_error"]
    inversions = sum(1 for a, c in zip(errs, errs[1:]) if c > a)
    initial = float(np.mean([r["initial_error"] for r in b.summary["runs"]]))
    frac = errs[-1] / initial
    secs = _seconds(bundles, "c09_minimax")
    ok = b.ok and inversions <= 1 and frac <= 0.25 and secs < 180
    _record(acceptance_log, 9, ok, f"{inversions} inversions (<= 1), final/initial {frac:.4f} (<= 0.25), "
                                   f"{secs:.1f}s (< 180s)")


def test_criterion_10_mixing(bundles, acceptance_log):
    b = bundles["c10_mixing"]
    mix = b.summary["mixing"]
    p = ExperimentSpec.load(CONFIGS / "c10_mixing.toml").environment["p_stay"]
    prof = np.array(mix["profile"])
    closed = 0.5 * abs(2 * p - 1) ** np.arange(len(prof))
    secs = _seconds(bundles, "c10_mixing")
    ok = (b.ok and mix["r2"] >= 0.999 and abs(mix["rho"] - abs(2 * p - 1)) <= 1e-6
          and np.max(np.abs(prof - closed)) <= 1e-12 and secs < 5)
    _record(acceptance_log, 10, ok, f"R2 {mix['r2']:.6f} (>= 0.999), rho {mix['rho']:.6f} vs |2p-1| "
                                    f"{abs(2 * p - 1):.6f}, {secs:.2f}s (< 5s)")


def _brute_q(jac, mu, disp, n_s, n_a):
    out = np.zeros((jac.shape[1], jac.shape[1]))
    for s in range(n_s):
        rows = jac[s * n_a:(s + 1) * n_a]
        best = max(range(n_a), key=lambda a: (abs(rows[a] @ disp), -a))
        out += mu[s] * np.outer(rows[best], rows[best])
    return out


def _pick(qmat):
    a1 = max(range(qmat.shape[0]), key=lambda i: (qmat[i].min(), -i))
    a2 = min(range(qmat.shape[1]), key=lambda j: (qmat[a1, j], j))
    return a1, a2


def _brute_minimax(jac, q0, mu, t1, t2, theta0, n_s, n1, n2):
    g = jac.reshape(n_s, n1, n2, -1)
    out = np.zeros((jac.shape[1], jac.shape[1]))
    for s in range(n_s):
        b = _pick((q0 + jac @ (t1 - theta0)).reshape(n_s, n1, n2)[s])
        c = _pick((q0 + jac @ (t2 - theta0)).reshape(n_s, n1, n2)[s])
        cands = [(b[0], c[1]), (c[0], b[1])]
        scores = [abs(g[s, i, j] @ (t1 - t2)) for i, j in cands]
        i, j = cands[1] if scores[1] > scores[0] else cands[0]
        out += mu[s] * np.outer(g[s, i, j], g[s, i, j])
    return out


def _factored_vs_brute():
    """Worst entry gap between the factored Sigma* and a per-state outer-product sum."""
    worst = 0.0
    rng = np.random.default_rng(0)
    games = [random_game(2, 2, 2, 0.9, seed=0)]
    for name in ("c11a_regularity", "c11b_regularity"):
        spec = ExperimentSpec.load(CONFIGS / f"{name}.toml")
        env = build_environment(spec.environment)
        pol = build_policy(spec.policy, env)
        if isinstance(env, MarkovGame):
            games.append(env)
            continue
        params, theta0 = init_params(2, 8, env.n_states * env.n_actions, seed=0)
        _, jac = support_jacobian(params, one_hot_features(env.n_states, env.n_actions).table)
        mu = state_distribution(env, pol)
        for _ in range(10):
            disp = rng.standard_normal(params.n)
            f, _ = greedy_factor_q(jac, mu, disp, env.n_states, env.n_actions)
            worst = max(worst, float(np.max(np.abs(f.T @ f - _brute_q(jac, mu, disp, env.n_states,
                                                                         env.n_actions)))))
    for game in games:
        n_s, n1, n2 = game.n_states, game.n_actions_p1, game.n_actions_p2
        pol = build_policy(None, game)
        params, theta0 = init_params(2, 8, n_s * n1 * n2, seed=0)
        q0, jac = support_jacobian(params, one_hot_game_features(n_s, n1, n2).table)
        mu = state_distribution(game, pol)
        for _ in range(10):
            t1 = theta0 + rng.standard_normal(params.n)
            t2 = theta0 + rng.standard_normal(params.n)
            f, _ = minimax_star_factor(jac, q0, mu, t1, t2, theta0, n_s, n1, n2)
            brute = _brute_minimax(jac, q0, mu, t1, t2, theta0, n_s, n1, n2)
            worst = max(worst, float(np.max(np.abs(f.T @ f - brute))))
    return worst


def test_criterion_11_regularity(bundles, acceptance_log):
    names = ["c11a_regularity", "c11b_regularity"]
    mins = [bundles[n].summary["regularity"]["min_eigenvalue"] for n in names]
    gammas = [bundles[n].summary["regularity"]["gamma"] for n in names]
    brute = _factored_vs_brute()
    secs = _seconds(bundles, *names)
    ok = (all(bundles[n].ok for n in names) and all(g == 0.0 for g in gammas) and min(mins) > 0
          and brute <= 1e-10 and secs < 30)
    _record(acceptance_log, 11, ok, f"gamma=0 minima {', '.join(f'{v:.4f}' for v in mins)} (> 0), "
                                    f"brute-force vs factored {brute:.1e} (<= 1e-10), {secs:.2f}s (< 30s)")


def _csvs(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*.csv"))}


def test_criterion_12_determinism(bundles, tmp_path, acceptance_log):
    first_root = next(iter(bundles.values())).out_dir.parent
    again = _run_all(tmp_path)
    a, b = _csvs(first_root), _csvs(tmp_path)
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a and set(a) == set(b) and not differing and all(x.ok for x in again.values())
    _record(acceptance_log, 12, ok, f"{len(a)} CSVs compared, {len(differing)} differ")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
