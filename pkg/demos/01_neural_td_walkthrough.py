# %% [markdown]
# # Neural TD on a small random MDP
#
# This walkthrough builds a 5-state, 2-action MDP and computes the exact
# action values of the uniform policy. It then trains a two-layer ELU
# network with projected TD and compares the result against the projected
# fixed point of the linearized network.

# %%
import numpy as np

from neuraltd import (
    Reference,
    Schedule,
    TabularPolicy,
    TrainConfig,
    estimate_sigma,
    exact_q_pi,
    init_params,
    one_hot_features,
    projected_fixed_point,
    random_mdp,
    stationary_distribution,
    train,
)

# %% [markdown]
# ## Environment and ground truth

# %%
mdp = random_mdp(5, 2, gamma=0.9, seed=0)
policy = TabularPolicy.uniform(5, 2)
q_pi = exact_q_pi(mdp, policy)
d = stationary_distribution(mdp, policy).ravel()
print("Q^pi:\n", np.round(q_pi, 3))
print("stationary state-action weights:", np.round(d, 3))

# %% [markdown]
# ## Network, feature covariance and fixed point
#
# With one-hot features the linearized class can represent any Q table,
# so the projected fixed point coincides with Q^pi.

# %%
features = one_hot_features(5, 2)
params, theta0 = init_params(depth=2, width=256, in_dim=features.dim, seed=0)
sigma = estimate_sigma(params, features, d)
print(f"rank {sigma.rank}, lambda0 {sigma.lambda0:.4f}, sigma_max {sigma.sigma_max:.4f}")

fp = projected_fixed_point(params, features, mdp, policy, omega=1.0)
print("max |Q_hat(theta*) - Q^pi| =", np.max(np.abs(fp.q_hat - q_pi.ravel())))
print("||theta* - theta0|| =", round(fp.delta_norm, 3))

# %% [markdown]
# ## Training with the theorem step size
#
# The projection radius is twice the distance to the fixed point, and
# the step size is 1 / (2 (1 - gamma) lambda0 (t + 1)).

# %%
config = TrainConfig(
    algorithm="td",
    omega=2 * fp.delta_norm,
    T=4096,
    seed=0,
    eval_every=512,
    schedule=Schedule("theorem", lambda0=sigma.lambda0),
)
final, record = train(mdp, policy, features, params, config, reference=Reference(fp.q_hat, d))
for t, err in zip(record.t, record.q_eval_error):
    print(f"T={t:5d}  weighted squared error vs Q_hat(theta*) = {err:.4f}")

# %%
print("projection hits:", sum(record.projection_hit))
print("final ||theta - theta0|| =", round(record.theta_dist[-1], 3))
