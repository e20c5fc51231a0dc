"""Spectral and structural checks on the linearized network.

Everything is computed exactly over the finite support of the stationary
distribution.  Sigma = J^T D J is never formed at full size: the weighted
factor D^{1/2} J (p x n, p small) carries its spectrum and range.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from neuraltd.env import (
    MarkovGame,
    _as_mdp_and_policy,
    state_distribution,
    stationary_distribution,
)
from neuraltd.errors import ConfigurationError, DiagnosticsError
from neuraltd.features import FeatureMap, random_unit_features
from neuraltd.network import NetworkParams, init_params, q_values, support_jacobian, value_and_grad
from neuraltd.oracles import bellman_pi, range_basis

# Kernel bases are materialized only up to this many parameters.
MAX_DENSE_KERNEL = 4096
SPECTRUM_HEADER = ("m", "sigma_max", "sigma_min_nonzero", "ratio", "rank")


@dataclass
class SigmaEstimate:
    """Sigma = factor^T factor with factor = sqrt(w) * J over the support.

    ``singular_values`` are those of the factor; Sigma's eigenvalues are
    their squares.  ``sigma_max`` / ``sigma_min_nonzero`` refer to Sigma.
    """

    factor: np.ndarray
    support: np.ndarray
    weights: np.ndarray
    singular_values: np.ndarray
    rank: int
    range_basis: np.ndarray
    threshold: float
    _kernel: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.factor.shape[1]

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.singular_values**2

    @property
    def sigma_max(self) -> float:
        return float(self.singular_values[0] ** 2) if self.rank else 0.0

    @property
    def sigma_min_nonzero(self) -> float:
        return float(self.singular_values[self.rank - 1] ** 2) if self.rank else 0.0

    @property
    def lambda0(self) -> float:
        return self.sigma_min_nonzero

    def matrix(self) -> np.ndarray:
        return self.factor.T @ self.factor

    def matvec(self, v) -> np.ndarray:
        return self.factor.T @ (self.factor @ v)

    @property
    def kernel_basis(self) -> np.ndarray:
        """Orthonormal kernel basis (n x (n - rank)); dense, so small n only."""
        if self._kernel is None:
            if self.n > MAX_DENSE_KERNEL:
                raise DiagnosticsError(f"kernel basis of size {self.n} not materialized; use project_kernel")
            if self.rank == 0:
                self._kernel = np.eye(self.n)
            else:
                self._kernel = null_space(self.range_basis.T)
        return self._kernel

    def project_range(self, v) -> np.ndarray:
        return self.range_basis @ (self.range_basis.T @ v)

    def project_kernel(self, v) -> np.ndarray:
        return v - self.project_range(v)


def estimate_sigma(params_at_init: NetworkParams, feature_map: FeatureMap, weights) -> SigmaEstimate:
    """Exact Sigma over the pairs with positive weight."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.size != feature_map.n_rows:
        raise ConfigurationError(f"weights have {w.size} entries, feature map has {feature_map.n_rows} rows")
    if np.any(w < 0):
        raise ConfigurationError("weights must be non-negative")
    support = np.flatnonzero(w > 0)
    if support.size == 0:
        raise ConfigurationError("empty support")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"weights sum to {w.sum()}, not 1")
    _, jac = support_jacobian(params_at_init, feature_map.table[support])
    factor = np.sqrt(w[support])[:, None] * jac
    s, basis, rank = range_basis(factor)
    threshold = max(factor.shape) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    return SigmaEstimate(factor, support, w[support], s, rank, basis, float(threshold))


def monte_carlo_sigma(params_at_init: NetworkParams, feature_map: FeatureMap, rows) -> np.ndarray:
    """Sample average of grad grad^T over the visited feature rows (cross-check only)."""
    rows = np.asarray(rows)
    _, jac = support_jacobian(params_at_init, feature_map.table[rows])
    return jac.T @ jac / len(rows)


@dataclass(frozen=True)
class SpectrumReport:
    m: int
    sigma_max: float
    sigma_min_nonzero: float
    ratio: float
    rank: int
    threshold: float = 0.0
    ratio_std: float = 0.0
    trials: int = 1

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def spectrum_reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPECTRUM_HEADER)
    for r in reports:
        w.writerow([r.m, repr(r.sigma_max), repr(r.sigma_min_nonzero), repr(r.ratio), r.rank])
    return buf.getvalue()


def spectrum_sweep(widths, trials_per_width, env, policy, feature_map: FeatureMap, seed=0, depth=2,
                   activation="elu") -> list[SpectrumReport]:
    """Per width, mean and std of sigma_max / sigma_min_nonzero over init seeds."""
    widths = list(widths)
    if widths != sorted(widths):
        raise ConfigurationError("widths must be ascending")
    if trials_per_width < 1:
        raise ConfigurationError("trials_per_width must be >= 1")
    d = stationary_distribution(env, policy).ravel()
    seeds = np.random.SeedSequence(seed).generate_state(trials_per_width)
    out = []
    for m in widths:
        est = []
        for s in seeds:
            params, _ = init_params(depth, m, feature_map.dim, seed=int(s), activation=activation)
            est.append(estimate_sigma(params, feature_map, d))
        ratios = np.array([e.sigma_max / e.sigma_min_nonzero for e in est])
        out.append(SpectrumReport(
            m=int(m),
            sigma_max=float(np.mean([e.sigma_max for e in est])),
            sigma_min_nonzero=float(np.mean([e.sigma_min_nonzero for e in est])),
            ratio=float(ratios.mean()),
            rank=int(min(e.rank for e in est)),
            threshold=float(max(e.threshold for e in est)),
            ratio_std=float(ratios.std()),
            trials=trials_per_width,
        ))
    return out


def kernel_orthogonality_check(sigma: SigmaEstimate, params_at_init: NetworkParams, feature_map: FeatureMap,
                               support=None) -> float:
    """max over kernel vectors v and support pairs x of |<grad Q(x; theta0), v>| / ||v||.

    For large n the kernel is not materialized and the bound
    ||(I - V V^T) g|| (the worst kernel direction for each g) is used.
    """
    support = sigma.support if support is None else np.asarray(support)
    if sigma.rank == sigma.n:
        return 0.0
    _, jac = support_jacobian(params_at_init, feature_map.table[support])
    if sigma.n <= MAX_DENSE_KERNEL:
        return float(np.max(np.abs(jac @ sigma.kernel_basis)))
    resid = jac - (jac @ sigma.range_basis) @ sigma.range_basis.T
    return float(np.max(np.linalg.norm(resid, axis=1)))


def subspace_decompose(sigma: SigmaEstimate, theta, theta_ref):
    """Split theta - theta_ref into range and kernel components."""
    diff = np.asarray(theta, dtype=np.float64) - np.asarray(theta_ref, dtype=np.float64)
    if diff.shape != (sigma.n,):
        raise ConfigurationError(f"theta has shape {diff.shape}, expected ({sigma.n},)")
    par = sigma.project_range(diff)
    return par, diff - par


def _restricted_min_eig(factor_pos, factor_neg, scale_pos, scale_neg):
    """lambda_min of scale_pos F+^T F+ - scale_neg F-^T F- on the joint range."""
    stacked = factor_pos if factor_neg is None else np.vstack([factor_pos, factor_neg])
    _, basis, rank = range_basis(stacked)
    if rank == 0:
        return 0.0
    a = factor_pos @ basis
    mat = scale_pos * (a.T @ a)
    if factor_neg is not None:
        b = factor_neg @ basis
        mat = mat - scale_neg * (b.T @ b)
    return float(np.linalg.eigvalsh(0.5 * (mat + mat.T))[0])


def _game_shape(env):
    if isinstance(env, MarkovGame):
        return env.n_actions_p1, env.n_actions_p2
    return (env.n_actions,)


def greedy_factor_q(jac, mu, theta_disp, n_states, n_actions):
    """Rows sqrt(mu(s)) grad Q(s, a_max; theta0), a_max maximizing |<grad, disp>|."""
    g = jac.reshape(n_states, n_actions, -1)
    scores = np.abs(g @ theta_disp)
    a_max = np.argmax(scores, axis=1)  # first maximizer on ties
    rows = g[np.arange(n_states), a_max]
    keep = mu > 0
    return np.sqrt(mu[keep])[:, None] * rows[keep], a_max


@dataclass
class RegularityReport:
    """Minimum restricted eigenvalue over theta samples at the given nu."""

    nu: float
    min_eigenvalue: float
    per_sample: list
    nu_max: float | None = None
    selectors: list = field(default_factory=list, repr=False)


def _nu_grid():
    return np.round(np.arange(1, 100) / 100.0, 2)


def _largest_nu(sigma_factor, star_factors, gamma, tol=-1e-8):
    best = None
    for nu in _nu_grid():
        worst = min(_restricted_min_eig(sigma_factor, None if gamma == 0 else f, (1 - nu) ** 2, gamma**2)
                    for f in star_factors)
        if worst >= tol:
            best = float(nu)
    return best


def regularity_probe_q(params_at_init: NetworkParams, feature_map: FeatureMap, env, policy, theta_samples,
                       nu=0.5, grid=True) -> RegularityReport:
    """lambda_min((1 - nu)^2 Sigma - gamma^2 Sigma*(theta)) on the joint range, minimized over samples.

    The greedy action of Sigma* maximizes |<grad Q(s, a; theta0), theta - theta0>|.
    With ``grid`` the largest nu on
    {0.01, ..., 0.99} keeping every probe >= -1e-8 is also reported.
    """
    mdp, pi = _as_mdp_and_policy(env, policy)
    gamma = mdp.gamma
    d = stationary_distribution(mdp, pi).ravel()
    mu = state_distribution(mdp, pi)
    sig = estimate_sigma(params_at_init, feature_map, d)
    _, jac = support_jacobian(params_at_init, feature_map.table)
    theta0 = params_at_init.theta
    factors, per, sel = [], [], []
    for theta in theta_samples:
        f, a_max = greedy_factor_q(jac, mu, np.asarray(theta) - theta0, mdp.n_states, mdp.n_actions)
        factors.append(f)
        sel.append(a_max)
        per.append(_restricted_min_eig(sig.factor, None if gamma == 0 else f, (1 - nu) ** 2, gamma**2))
    nu_max = _largest_nu(sig.factor, factors, gamma) if grid else None
    return RegularityReport(float(nu), float(min(per)), per, nu_max, sel)


def _selector(qmat, order):
    """(a1, a2) attaining the pure-strategy value, smallest indices on ties."""
    if order == "maxmin":
        a1 = int(np.argmax(qmat.min(axis=1)))
        a2 = int(np.argmin(qmat[a1]))
    else:
        a1 = int(np.argmin(qmat.max(axis=1)))
        a2 = int(np.argmax(qmat[a1]))
    return a1, a2


def minimax_star_factor(jac, q0, mu, theta1, theta2, theta0, n_states, n1, n2, order="maxmin"):
    """Rows sqrt(mu(s)) grad Q(s, a1*, a2*; theta0) for the cross-pair selector.

    Each theta_i picks (a1, a2) by the pure-strategy rule on its linearized Q;
    the candidate (a1 of theta1, a2 of theta2) or (a1 of theta2, a2 of theta1)
    with the larger |<grad, theta1 - theta2>| wins, the first on ties.
    """
    g = jac.reshape(n_states, n1, n2, -1)
    q1 = (q0 + jac @ (theta1 - theta0)).reshape(n_states, n1, n2)
    q2 = (q0 + jac @ (theta2 - theta0)).reshape(n_states, n1, n2)
    diff = theta1 - theta2
    rows, picks = [], []
    for s in range(n_states):
        b1, b2 = _selector(q1[s], order)
        c1, c2 = _selector(q2[s], order)
        cand = [(b1, c2), (c1, b2)]
        score = [abs(float(g[s, i, j] @ diff)) for i, j in cand]
        pick = cand[1] if score[1] > score[0] else cand[0]
        picks.append(pick)
        rows.append(g[s, pick[0], pick[1]])
    rows = np.array(rows)
    keep = mu > 0
    return np.sqrt(mu[keep])[:, None] * rows[keep], picks


def regularity_probe_minimax(params_at_init: NetworkParams, feature_map: FeatureMap, game: MarkovGame,
                             policy_pair, theta_pairs, nu=0.5, order="maxmin", grid=True) -> RegularityReport:
    """Game analogue of :func:`regularity_probe_q` over pairs (theta1, theta2)."""
    gamma = game.gamma
    d = stationary_distribution(game, policy_pair).ravel()
    mu = state_distribution(game, policy_pair)
    sig = estimate_sigma(params_at_init, feature_map, d)
    q0, jac = support_jacobian(params_at_init, feature_map.table)
    theta0 = params_at_init.theta
    factors, per, sel = [], [], []
    for th1, th2 in theta_pairs:
        f, picks = minimax_star_factor(jac, q0, mu, np.asarray(th1), np.asarray(th2), theta0, game.n_states,
                                       game.n_actions_p1, game.n_actions_p2, order)
        factors.append(f)
        sel.append(picks)
        per.append(_restricted_min_eig(sig.factor, None if gamma == 0 else f, (1 - nu) ** 2, gamma**2))
    nu_max = _largest_nu(sig.factor, factors, gamma) if grid else None
    return RegularityReport(float(nu), float(min(per)), per, nu_max, sel)


def _weighted_norm(v, w):
    return math.sqrt(float(np.sum(w * v * v)))


def contraction_check(env, policy, n_trials=100, seed=0, scale=None) -> float:
    """Largest ||T^pi Q1 - T^pi Q2||_d / ||Q1 - Q2||_d over random bounded pairs."""
    mdp, pi = _as_mdp_and_policy(env, policy)
    d = stationary_distribution(mdp, pi)
    rng = np.random.default_rng(seed)
    bound = scale if scale is not None else max(1.0, float(np.max(np.abs(mdp.reward)))) / (1.0 - mdp.gamma)
    worst = 0.0
    for _ in range(n_trials):
        q1 = rng.uniform(-bound, bound, mdp.reward.shape)
        q2 = rng.uniform(-bound, bound, mdp.reward.shape)
        den = _weighted_norm(q1 - q2, d)
        if den == 0.0:
            continue
        num = _weighted_norm(bellman_pi(mdp, pi, q1) - bellman_pi(mdp, pi, q2), d)
        worst = max(worst, num / den)
    return worst


def contraction_ratio(env, policy, q1, q2) -> float:
    """One ratio; 0 when Q1 = Q2 on the support."""
    mdp, pi = _as_mdp_and_policy(env, policy)
    d = stationary_distribution(mdp, pi)
    q1 = np.asarray(q1, dtype=np.float64).reshape(mdp.reward.shape)
    q2 = np.asarray(q2, dtype=np.float64).reshape(mdp.reward.shape)
    den = _weighted_norm(q1 - q2, d)
    if den == 0.0:
        return 0.0
    return _weighted_norm(bellman_pi(mdp, pi, q1) - bellman_pi(mdp, pi, q2), d) / den


@dataclass(frozen=True)
class GapScan:
    widths: list
    max_gap: list
    random_gap: list

    def ratio(self, i=0, j=-1) -> float:
        return self.max_gap[i] / self.max_gap[j]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "max_gap": list(self.max_gap), "random_gap": list(self.random_gap)}


def _sphere_point(theta0, direction, omega):
    return theta0 + omega * direction / np.linalg.norm(direction)


def _gap_and_grad(params, x, theta, q0, g0, theta0):
    q, g = value_and_grad(params, x, theta)
    gap = q - (q0 + g0 @ (theta - theta0))
    return gap, g - g0


def linearization_gap_scan(depth, in_dim, widths, omega, n_theta=4, n_x=4, seed=0, activation="elu",
                           ascent_steps=30, include_base=False) -> GapScan:
    """Max |Q - Q_hat| on the sphere ||theta - theta0|| = omega, per width.

    Random sphere points are refined by projected gradient ascent of the
    gap along the sphere; random directions alone are nearly orthogonal to
    the curvature and understate the worst case.
    """
    widths = list(widths)
    if widths != sorted(widths):
        raise ConfigurationError("widths must be ascending")
    if n_theta < 1 or n_x < 1:
        raise ConfigurationError("n_theta and n_x must be >= 1")
    maxes, randoms = [], []
    for m in widths:
        ss = np.random.SeedSequence([seed, m])
        init_seed, x_seed, dir_seed = ss.spawn(3)
        params, theta0 = init_params(depth, m, in_dim, seed=init_seed, activation=activation)
        xs = (random_unit_features(n_x, in_dim, seed=x_seed).table if in_dim >= 2
              else np.ones((n_x, 1)))
        rng = np.random.default_rng(dir_seed)
        best, best_random = 0.0, 0.0
        for x in xs:
            q0, g0 = value_and_grad(params, x)
            if include_base:
                best = max(best, abs(q_values(params, x, theta0) - q0))
            for _ in range(n_theta):
                theta = _sphere_point(theta0, rng.standard_normal(params.n), omega)
                gap, grad = _gap_and_grad(params, x, theta, q0, g0, theta0)
                best_random = max(best_random, abs(gap))
                step = omega
                for _ in range(ascent_steps):
                    disp = theta - theta0
                    tang = np.sign(gap) * grad
                    tang -= (tang @ disp) / (omega * omega) * disp
                    norm = np.linalg.norm(tang)
                    if norm == 0.0:
                        break
                    cand = _sphere_point(theta0, disp + step * tang / norm, omega)
                    cgap, cgrad = _gap_and_grad(params, x, cand, q0, g0, theta0)
                    if abs(cgap) > abs(gap):
                        theta, gap, grad = cand, cgap, cgrad
                    else:
                        step *= 0.5
                best = max(best, abs(gap))
        maxes.append(float(max(best, best_random)))
        randoms.append(float(best_random))
    return GapScan(widths, maxes, randoms)


def _batched_q(params, x, thetas):
    """Q(x; theta_k) for every row theta_k of ``thetas`` in one pass."""
    sigma = params.sigma.value
    inv_sqrt_m = 1.0 / math.sqrt(params.width)
    z, off = None, 0
    for l, (rows, cols) in enumerate(params._shapes):
        w = thetas[:, off:off + rows * cols].reshape(-1, cols, rows)  # W^T per sample
        off += rows * cols
        h = x @ w if l == 0 else np.einsum("ki,kij->kj", z, w)
        z = sigma(h) * inv_sqrt_m if l < params.depth - 1 else sigma(h)
    return params.output_scale * (z @ params.b)


def finite_difference_grad(params: NetworkParams, x, h=1e-5, chunk=256) -> np.ndarray:
    """Central differences of Q over every coordinate of theta."""
    out = np.empty(params.n)
    for start in range(0, params.n, chunk):
        idx = np.arange(start, min(start + chunk, params.n))
        thetas = np.tile(params.theta, (len(idx), 1))
        rows = np.arange(len(idx))
        thetas[rows, idx] += h
        plus = _batched_q(params, x, thetas)
        thetas[rows, idx] = params.theta[idx] - h
        minus = _batched_q(params, x, thetas)
        out[idx] = (plus - minus) / (2.0 * h)
    return out


def gradient_check(depths=(1, 2, 3), widths=(4, 32), activations=("elu", "gelu", "sigmoid"), n_samples=50,
                   in_dim=3, seed=0, h=1e-5) -> dict:
    """Worst relative error of the analytic gradient against central differences.

    Each sample draws a fresh init, perturbs theta off the init point and
    draws a unit feature vector.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for depth in depths:
        for m in widths:
            for act in activations:
                key = f"L{depth}_m{m}_{act}"
                worst[key] = 0.0
                for _ in range(n_samples):
                    p, _ = init_params(depth, m, in_dim, seed=int(rng.integers(2**31)), activation=act)
                    p = p.with_theta(p.theta + 0.1 * rng.standard_normal(p.n))
                    x = rng.standard_normal(in_dim)
                    x /= np.linalg.norm(x)
                    _, g = value_and_grad(p, x)
                    fd = finite_difference_grad(p, x, h)
                    rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(g), 1e-300))
                    worst[key] = max(worst[key], rel)
    return {"max_rel_error": max(worst.values()), "per_case": worst}


def fit_rate_slope(points):
    """OLS of log error on log T; returns (slope, intercept, r2)."""
    pts = [(float(t), float(e)) for t, e in points]
    kept = [(t, e) for t, e in pts if e > 0 and t > 0]
    if len(kept) < len(pts):
        warnings.warn(f"dropped {len(pts) - len(kept)} non-positive points from the rate fit", stacklevel=2)
    if len(kept) < 3:
        raise DiagnosticsError(f"rate fit needs >= 3 positive points, got {len(kept)}")
    x = np.log([t for t, _ in kept])
    y = np.log([e for _, e in kept])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - float(np.sum(resid**2)) / ss_tot
    return float(slope), float(intercept), float(r2)


def diagnostics_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True)
