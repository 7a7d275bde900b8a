"""Gradient Expected Sarsa(lambda) for off-policy evaluation with linear features."""

from .analysis import (
    HurwitzError,
    KeyMatrices,
    RankError,
    SolvabilityError,
    boundedness_constants,
    fixed_point_table,
    key_matrices,
    lyapunov_system,
    mspbe,
    projected_bellman_mspbe,
    rate_constants,
    stability_check,
    td_fixed_point,
)
from .environments import BairdStarSpec, MountainCarEnv, MountainCarSpec, TabularEnv, TwoStateSpec, make_env, make_spec
from .harness import ExperimentConfig, RunRecord, divergence_demo, emit_results, empirical_key_matrices, empirical_mse, sweep
from .learners import (
    LearnerState,
    Transition,
    expected_saddle_step,
    ges_step,
    make_schedule,
    offline_expected_step,
    primal_dual_gap,
    run_episodes,
)
from .mdp import (
    ErgodicityError,
    FeatureMap,
    FiniteMdp,
    Policy,
    load_mdp_file,
    save_mdp_file,
    state_action_transition,
    stationary_distribution,
)

__version__ = "0.1.0"
