# %% [markdown]
# # Spectrum plateau, mixing and minimax value iteration
#
# Three short probes: how the condition number of the feature covariance
# settles as the width grows, the geometric mixing of a two-state chain,
# and the difference between the two pure-strategy backup orders in a game.

# %%
import numpy as np

from neuraltd import (
    TabularPolicy,
    backup_value,
    exact_minimax_q,
    fit_geometric_decay,
    mixing_profile,
    one_hot_features,
    random_game,
    random_mdp,
    spectrum_sweep,
    two_state_chain,
)

# %% [markdown]
# ## sigma_max / sigma_min versus width

# %%
mdp = random_mdp(5, 2, gamma=0.9, seed=0)
policy = TabularPolicy.uniform(5, 2)
reports = spectrum_sweep([64, 128, 256, 512], 3, mdp, policy, one_hot_features(5, 2), seed=0)
for r in reports:
    print(f"m={r.m:4d}  ratio={r.ratio:7.3f} +- {r.ratio_std:.3f}  rank={r.rank}")

# %% [markdown]
# ## Mixing of a two-state chain
#
# The total variation distance from the worst start decays as
# 0.5 |2p - 1|^t.

# %%
chain = two_state_chain(0.8)
profile = mixing_profile(chain, TabularPolicy.uniform(2, 1), 20)
kappa, rho, r2 = fit_geometric_decay(profile)
print(f"kappa={kappa:.4f} rho={rho:.4f} (|2p-1| = 0.6) R2={r2:.6f}")

# %% [markdown]
# ## Backup orders in a zero-sum game

# %%
m = np.array([[1.0, 0.0], [2.0, -1.0]])
print("maxmin:", backup_value(m, "maxmin"), " minmax:", backup_value(m, "minmax"))

game = random_game(2, 2, 2, gamma=0.9, seed=0)
q_maxmin = exact_minimax_q(game, order="maxmin")
q_minmax = exact_minimax_q(game, order="minmax")
print("max |difference| between orders:", np.max(np.abs(q_maxmin - q_minmax)).round(3))
