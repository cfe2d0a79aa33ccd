"""Reset-free (periodic) online learning in tabular MDPs via constrained mirror descent."""
from .algorithms import (
    Framework,
    ProtocolConfig,
    RegretLedger,
    loglog_slope,
    offline_optimal_periodic,
    periodic_regret,
    run_episodic_baseline,
    run_mdpp_k,
    run_mdpp_u,
    run_protocol,
)
from .config import RunConfig, desk_scale
from .environments import PRESETS, preset
from .mdp import Distribution, OccupancyMeasure, Policy, SpaceDims, TransitionKernel, forward_rollout
from .solver import DualState, EpisodeProblem, backward_q_and_policy, dual_ascent, solve_episode

__version__ = "0.1.0"
