"""Projected semi-gradient TD / Q-learning with wide multi-layer networks.

Tabular environments, feature maps, the network and its linearization,
the three learners, exact oracles, and spectral diagnostics.
"""

from neuraltd.errors import ConfigurationError, DiagnosticsError, NumericError, TrainingAborted
from neuraltd.env import (
    MarkovGame,
    TabularMdp,
    TabularPolicy,
    Trajectory,
    Transition,
    discretized_walk,
    epsilon_greedy,
    fit_geometric_decay,
    grid_world,
    mixing_profile,
    random_game,
    random_mdp,
    sample_game_trajectory,
    sample_trajectory,
    state_distribution,
    stationary_distribution,
    two_state_chain,
)
from neuraltd.features import (
    FeatureMap,
    grid_features,
    one_hot_features,
    one_hot_game_features,
    random_unit_features,
)
from neuraltd.network import (
    ACTIVATIONS,
    BallConstraint,
    NetworkParams,
    forward,
    grad_theta,
    init_params,
    linearized_q,
    project_ball,
    support_jacobian,
)
from neuraltd.algorithms import (
    Reference,
    RunRecord,
    Schedule,
    TrainConfig,
    step_size,
    td_error_minimax,
    td_error_optimality,
    td_error_policy_eval,
    train,
)
from neuraltd.oracles import (
    FixedPointReport,
    backup_value,
    bellman_pi,
    exact_minimax_q,
    exact_q_pi,
    exact_q_star,
    projected_fixed_point,
)
from neuraltd.diagnostics import (
    SigmaEstimate,
    SpectrumReport,
    contraction_check,
    estimate_sigma,
    fit_rate_slope,
    kernel_orthogonality_check,
    linearization_gap_scan,
    regularity_probe_minimax,
    regularity_probe_q,
    spectrum_sweep,
    subspace_decompose,
)

from neuraltd.runner import ExperimentSpec, ResultBundle, replicate_figure1, run_experiment

__version__ = "0.1.0"
