from dataclasses import replace
from types import SimpleNamespace

import numpy as np
import pytest
from scipy import stats

from periodic_mdp import oracles
from periodic_mdp.algorithms import (
    EpisodeRecord,
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
from periodic_mdp.environments import ObjectiveSpec, build_environment, entropy_objective, parse_map
from periodic_mdp.errors import ConfigurationError, SolverAbort
from periodic_mdp.estimation import BonusSchedule
from periodic_mdp.mdp import (
    Distribution,
    Policy,
    SpaceDims,
    TransitionKernel,
    episode_transition_matrix,
    forward_rollout,
    sample_start,
)
from periodic_mdp.solver import DualState, EpisodeProblem, backward_q_and_policy

DESK = dict(bonus_scale=1e-4, pool_steps=True, dual_method="bisection", on_infeasible="best_effort")
ZERO = ObjectiveSpec("zero", lambda mu: np.zeros(np.shape(mu)[:-2]), lambda mu: np.zeros(np.shape(mu)), 1.0)


@pytest.fixture(scope="module")
def small_env():
    return build_environment(parse_map("S..\n...\n..."), 6, "max-entropy", "tiny")


@pytest.fixture(scope="module")
def small_comparator(small_env):
    return offline_optimal_periodic(small_env, small_env.objective)


def symmetric_env():
    """Action-independent uniform kernel; the uniform policy keeps the uniform start fixed."""
    dims = SpaceDims(2, 2, 3)
    return SimpleNamespace(dims=dims, kernel=TransitionKernel(np.full((3, 2, 2, 2), 0.5)),
                           rho=Distribution(np.full((2, 2), 0.25)), grid=None)


def hand_ledger(gamma, losses, comps, gaps):
    ledger = RegretLedger(gamma)
    for t, (loss, comp, gap) in enumerate(zip(losses, comps, gaps), 1):
        ledger.append(EpisodeRecord(t, loss, comp, gap, float("nan"), 0.0, 0, 0.0, 0.1))
    return ledger


# ---------------------------------------------------------------------------
# Configuration


def test_protocol_config_validation():
    with pytest.raises(ConfigurationError):
        ProtocolConfig(num_agents=1)
    ProtocolConfig(num_agents=1, framework=Framework.EPISODIC_BASELINE)
    with pytest.raises(ConfigurationError):
        ProtocolConfig(alpha_bar=1.0)
    with pytest.raises(ConfigurationError):
        ProtocolConfig(num_episodes=0)
    with pytest.raises(ConfigurationError):
        ProtocolConfig(dual_method="newton")
    assert ProtocolConfig(framework="u").framework is Framework.UNKNOWN_RHO


def test_runners_check_framework(small_env):
    with pytest.raises(ConfigurationError):
        run_mdpp_u(small_env, small_env.objective, ProtocolConfig(num_episodes=1))


# ---------------------------------------------------------------------------
# Regret ledger


def test_regret_hand_ledger():
    ledger = hand_ledger(10.0, (1.0, 2.0, 0.5), (0.8, 1.5, 0.7), (0.0, 0.1, 0.2))
    assert ledger.regret_cum[-1] == pytest.approx(3.5, abs=1e-12)
    assert periodic_regret(ledger, 10.0)[-1] == pytest.approx(3.5, abs=1e-12)


def test_regret_zero_under_self_play():
    ledger = hand_ledger(1000.0, (1.5, -2.0, 0.3), (1.5, -2.0, 0.3), (0.0, 0.0, 0.0))
    assert np.all(periodic_regret(ledger, 1000.0) == 0.0)


def test_regret_linear_in_gamma():
    ledger = hand_ledger(5.0, (1.0, 2.0, 3.0), (0.5, 0.5, 0.5), (0.3, 0.2, 0.1))
    diff = periodic_regret(ledger, 10.0) - periodic_regret(ledger, 5.0)
    assert np.allclose(diff, 5.0 * np.cumsum([0.3, 0.2, 0.1]), atol=1e-12)


def test_record_rejects_bad_gap():
    with pytest.raises(Exception):
        EpisodeRecord(1, 0.0, 0.0, 2.5, float("nan"), 0.0, 0, 0.0, 0.0)


def test_loglog_slope_of_power_law():
    t = np.arange(1, 401, dtype=float)
    assert loglog_slope(3.0 * t**0.75) == pytest.approx(0.75, abs=1e-12)
    assert np.isnan(loglog_slope(np.r_[-1.0, -1.0, -1.0]))


# ---------------------------------------------------------------------------
# Offline comparator


def test_comparator_symmetric_mdp():
    env = symmetric_env()
    obj = entropy_objective()
    result = offline_optimal_periodic(env, obj)
    uniform = forward_rollout(Policy.uniform(env.dims), env.rho, env.kernel)
    assert result.periodicity_defect < 1e-3
    assert obj.value(result.occupancy.slices) == pytest.approx(obj.value(uniform.slices), abs=1e-3)


def test_comparator_single_action_mdp():
    dims = SpaceDims(2, 1, 2)
    probs = np.zeros((2, 2, 1, 2))
    probs[:, 0, 0] = (0.7, 0.3)
    probs[:, 1, 0] = (0.4, 0.6)
    kernel = TransitionKernel(probs)
    rho = Distribution(np.array([[1.0], [0.0]]))
    env = SimpleNamespace(dims=dims, kernel=kernel, rho=rho)
    result = offline_optimal_periodic(env, entropy_objective())
    assert np.all(result.policy.action_probs == 1.0)
    # Two steps of the chain from state 0: (0.7, 0.3) then (0.61, 0.39).
    assert result.periodicity_defect == pytest.approx(0.78, abs=1e-12)


def test_comparator_matches_periodic_policy_grid():
    rng = np.random.default_rng(0)
    dims = SpaceDims(2, 2, 2)
    kernel = oracles.random_kernel(rng, dims)
    levels = rng.integers(1, 50, size=(2, 2)) * 0.02
    grid_policy = Policy(np.stack([levels, 1 - levels], axis=-1))
    # rho is the stationary law of the grid policy's episode map, so the grid holds a periodic policy.
    vals, vecs = np.linalg.eig(episode_transition_matrix(grid_policy, kernel).T)
    stationary = np.real(vecs[:, np.argmin(np.abs(vals - 1))])
    rho = Distribution((stationary / stationary.sum()).reshape(2, 2))
    env = SimpleNamespace(dims=dims, kernel=kernel, rho=rho)
    obj = entropy_objective()
    result = offline_optimal_periodic(env, obj)
    value = obj.value(result.occupancy.slices)
    grid = oracles.grid_periodic_minimum(obj, kernel, rho, 1e-3)
    assert result.periodicity_defect < 1e-3
    assert value <= grid.value + 1e-9
    assert value >= grid.value - 0.05


def test_comparator_on_gridworld(small_env, small_comparator):
    assert small_comparator.periodicity_defect < 1e-3
    # Staying at the start forever is periodic with value 0; the comparator spreads mass and does better.
    stay = np.zeros((small_env.dims.horizon, small_env.dims.num_states, 5))
    stay[..., 4] = 1.0
    stay_value = small_env.objective.value(forward_rollout(Policy(stay), small_env.rho, small_env.kernel).slices)
    assert stay_value == pytest.approx(0.0, abs=1e-9)
    assert small_env.objective.value(small_comparator.occupancy.slices) < stay_value - 1.0


# ---------------------------------------------------------------------------
# Protocols


def test_ledger_length_and_recomputation(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=12, seed=3, **DESK)
    ledger = run_mdpp_k(small_env, small_env.objective, config, comparator=small_comparator)
    assert len(ledger) == 12
    assert [r.t for r in ledger.records] == list(range(1, 13))
    assert ledger.recomputation_error() <= 1e-9


def test_first_episode_plays_uniform_policy_from_rho(small_env, small_comparator):
    ledger = run_mdpp_k(small_env, small_env.objective, ProtocolConfig(num_episodes=2, **DESK),
                        comparator=small_comparator)
    uniform = forward_rollout(Policy.uniform(small_env.dims), small_env.rho, small_env.kernel)
    assert ledger.records[0].loss == pytest.approx(small_env.objective.value(uniform.slices), abs=1e-12)
    assert ledger.records[0].rho_gap == 0.0


def test_fixed_point_keeps_rho():
    env = symmetric_env()
    config = ProtocolConfig(num_episodes=8, alpha_bar=0.0, mix_rate=0.0)
    ledger = run_protocol(env, ZERO, config, comparator=forward_rollout(Policy.uniform(env.dims), env.rho, env.kernel),
                          kernel_override=env.kernel, zero_bonuses=True)
    assert np.all(ledger.column("rho_gap") <= 1e-12)


def test_runs_are_deterministic(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=10, seed=11, framework="u", **DESK)
    a = run_mdpp_u(small_env, small_env.objective, config, comparator=small_comparator)
    b = run_mdpp_u(small_env, small_env.objective, config, comparator=small_comparator)
    assert a.records == b.records
    assert a.regret_cum == b.regret_cum


def test_seeds_change_the_run(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=10, framework="u", **DESK)
    a = run_mdpp_u(small_env, small_env.objective, config, comparator=small_comparator)
    b = run_mdpp_u(small_env, small_env.objective, replace(config, seed=1), comparator=small_comparator)
    assert a.regret_cum != b.regret_cum


def test_constraint_met_every_episode_with_zero_objective():
    env = build_environment(parse_map("S..\n...", noise=0.0), 4, "max-entropy", "noiseless")
    # Exact dynamics and no bonuses: the uniform prior does not return, so the constraint binds.
    config = ProtocolConfig(num_episodes=15, dual_method="bisection")
    comparator = forward_rollout(Policy.uniform(env.dims), env.rho, env.kernel)
    ledger = run_mdpp_k(env, ZERO, config, comparator=comparator, kernel_override=env.kernel, zero_bonuses=True)
    assert ledger.records[0].lambda_final > 0
    assert np.all(ledger.column("g_final") <= 1e-3)


def test_solver_failure_aborts_with_episode_index(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=5, dual=DualState(max_iters=1), alpha_bar=0.0, bonus_scale=1e-4)
    with pytest.raises(SolverAbort) as info:
        run_mdpp_k(small_env, small_env.objective, config, comparator=small_comparator)
    assert info.value.episode == 1


def test_unknown_rho_starts_exact(small_env, small_comparator):
    ledger = run_mdpp_u(small_env, small_env.objective, ProtocolConfig(num_episodes=3, framework="u", **DESK),
                        comparator=small_comparator)
    assert ledger.records[0].rho_tilde_gap == 0.0


def test_unknown_rho_with_true_restart_kernel_is_exact(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=15, framework="u", **DESK)
    ledger = run_mdpp_u(small_env, small_env.objective, config, comparator=small_comparator,
                        tilde_kernel_override=small_env.kernel)
    assert np.all(ledger.column("rho_tilde_gap") <= 1e-12)
    assert np.any(ledger.column("rho_gap") > 1e-3)


def test_rho_tilde_error_shrinks_with_horizon(small_env, small_comparator):
    means = []
    for num_episodes in (20, 60, 180):
        per_seed = []
        for seed in range(10):
            config = ProtocolConfig(num_episodes=num_episodes, framework="u", seed=seed, **DESK)
            ledger = run_mdpp_u(small_env, small_env.objective, config, comparator=small_comparator)
            per_seed.append(ledger.column("rho_tilde_gap").mean())
        means.append(np.mean(per_seed))
    assert means[0] > means[1] > means[2]


def test_finite_agent_mode_runs(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=6, num_agents=3, finite_agents=True, framework="u", **DESK)
    a = run_protocol(small_env, small_env.objective, config, comparator=small_comparator)
    b = run_protocol(small_env, small_env.objective, config, comparator=small_comparator)
    assert len(a) == 6 and a.records == b.records


def test_sampled_starts_follow_distribution():
    rng = np.random.default_rng(6)
    rho = Distribution(np.array([[0.1, 0.2], [0.3, 0.4]]))
    counts = np.zeros(4)
    for _ in range(20000):
        x, a = sample_start(rho, rng)
        counts[2 * x + a] += 1
    assert stats.chisquare(counts, 20000 * rho.mass.ravel()).pvalue > 1e-3


# ---------------------------------------------------------------------------
# Episodic baseline


def test_baseline_without_penalty_is_unconstrained(small_env, small_comparator):
    config = ProtocolConfig(num_episodes=5, framework="baseline", gamma=0.0, **DESK)
    ledger = run_episodic_baseline(small_env, small_env.objective, config, comparator=small_comparator)
    assert np.all(ledger.column("lambda_final") == 0.0)


def test_baseline_always_plans_from_rho(small_env):
    captured = []
    config = ProtocolConfig(num_episodes=3, framework="baseline", mix_rate=0.0, gamma=50.0)
    comparator = forward_rollout(Policy.uniform(small_env.dims), small_env.rho, small_env.kernel)
    ledger = run_episodic_baseline(small_env, small_env.objective, config, comparator=comparator,
                                   kernel_override=small_env.kernel, zero_bonuses=True,
                                   callback=lambda state: captured.append(state.policy))
    # Replay the same steps by hand, always starting the plan at rho.
    dims, kernel, rho = small_env.dims, small_env.kernel, small_env.rho
    policy = Policy.uniform(dims)
    plan = forward_rollout(policy, rho, kernel)
    for got in captured:
        problem = EpisodeProblem(small_env.objective.gradient(plan.slices), BonusSchedule.zeros(dims), policy,
                                 kernel, rho, rho, config.eta, 0.0)
        _, policy, plan = backward_q_and_policy(problem, config.gamma)
        assert np.array_equal(got.action_probs, policy.action_probs)
    assert ledger.records[-1].rho_gap > 0.0
