import math

import numpy as np
import pytest

from conftest import one_action_policy, state_distribution, swap_kernel
from periodic_mdp import oracles
from periodic_mdp.errors import ConfigurationError
from periodic_mdp.estimation import (
    VisitCounters,
    bonus_schedule,
    confidence_constant,
    empirical_kernel,
    propagate_rho_tilde,
    update_counts,
)
from periodic_mdp.mdp import (
    Policy,
    SpaceDims,
    Trajectory,
    episode_transition_matrix,
    sample_trajectory,
)

DIMS = SpaceDims(3, 2, 4)


def random_trajectory(rng, dims=DIMS):
    policy = oracles.random_policy(rng, dims)
    kernel = oracles.random_kernel(rng, dims)
    return sample_trajectory(policy, kernel, (0, 0), rng)


# ---------------------------------------------------------------------------
# update_counts


def test_single_trajectory_counts_one_per_step(rng):
    counters = update_counts(VisitCounters(DIMS), random_trajectory(rng))
    assert np.array_equal(counters.pair_counts.sum(axis=(1, 2)), np.ones(DIMS.horizon))
    assert np.array_equal(counters.triple_counts.sum(axis=-1), counters.pair_counts)


def test_same_trajectory_twice_doubles(rng):
    traj = random_trajectory(rng)
    once = update_counts(VisitCounters(DIMS), traj)
    twice = update_counts(once, traj)
    assert np.array_equal(twice.pair_counts, 2 * once.pair_counts)
    assert np.array_equal(twice.triple_counts, 2 * once.triple_counts)


def test_update_counts_does_not_mutate(rng):
    base = VisitCounters(DIMS)
    update_counts(base, random_trajectory(rng))
    assert base.pair_counts.sum() == 0


def test_fifty_trajectories_counting_identity(rng):
    counters = VisitCounters(DIMS)
    previous = counters.pair_counts.copy()
    for _ in range(50):
        counters.update(random_trajectory(rng))
        assert np.all(counters.pair_counts >= previous)
        previous = counters.pair_counts.copy()
    assert np.array_equal(counters.pair_counts.sum(axis=(1, 2)), np.full(DIMS.horizon, 50))


def test_inconsistent_counters_rejected():
    pairs = np.zeros((1, 2, 1), dtype=int)
    triples = np.zeros((1, 2, 1, 2), dtype=int)
    pairs[0, 0, 0] = 1
    with pytest.raises(ConfigurationError):
        VisitCounters(SpaceDims(2, 1, 1), pairs, triples)


# ---------------------------------------------------------------------------
# empirical_kernel


def test_single_transition_is_certain():
    dims = SpaceDims(2, 2, 1)
    counters = VisitCounters(dims).update(Trajectory([0, 1], [0, 0]))
    kernel = empirical_kernel(counters, dims)
    assert kernel.probs[0, 0, 0, 1] == 1.0
    assert kernel.probs[0, 0, 0, 0] == 0.0


def test_unvisited_rows_uniform():
    dims = SpaceDims(4, 2, 3)
    kernel = empirical_kernel(VisitCounters(dims), dims)
    assert np.all(kernel.probs == 0.25)


def test_two_outcomes_split_evenly():
    dims = SpaceDims(3, 1, 1)
    counters = VisitCounters(dims).update(Trajectory([0, 1], [0, 0])).update(Trajectory([0, 2], [0, 0]))
    assert np.array_equal(empirical_kernel(counters).probs[0, 0, 0], [0.0, 0.5, 0.5])


def test_empirical_rows_stochastic(rng):
    counters = VisitCounters(DIMS)
    for _ in range(30):
        counters.update(random_trajectory(rng))
    for pooled in (False, True):
        probs = empirical_kernel(counters, pooled=pooled).probs
        assert np.max(np.abs(probs.sum(axis=-1) - 1.0)) <= 1e-12


def test_pooled_kernel_merges_steps():
    dims = SpaceDims(2, 1, 2)
    counters = VisitCounters(dims).update(Trajectory([0, 1, 1], [0, 0, 0])).update(Trajectory([0, 0, 1], [0, 0, 0]))
    kernel = empirical_kernel(counters, pooled=True)
    # Pooled counts from state 0: to 1 twice, to 0 once.
    assert np.allclose(kernel.probs[0, 0, 0], [1 / 3, 2 / 3])
    assert np.array_equal(kernel.probs[0], kernel.probs[1])


# ---------------------------------------------------------------------------
# bonus_schedule


def test_unvisited_bonus_equals_constant():
    bonuses = bonus_schedule(VisitCounters(DIMS), DIMS, 0.1, 2.0, 100)
    assert np.all(bonuses.slack == bonuses.c_delta)
    assert np.allclose(bonuses.gradient[0], 2.0 * DIMS.horizon * bonuses.c_delta)
    assert np.allclose(bonuses.gradient[-1], 2.0 * 1 * bonuses.c_delta)


def test_count_four_halves_bonus():
    dims = SpaceDims(2, 1, 1)
    one = VisitCounters(dims).update(Trajectory([0, 1], [0, 0]))
    four = VisitCounters(dims)
    for _ in range(4):
        four.update(Trajectory([0, 1], [0, 0]))
    b1 = bonus_schedule(one, dims, 0.1, 1.0, 10).slack[0, 0, 0]
    b4 = bonus_schedule(four, dims, 0.1, 1.0, 10).slack[0, 0, 0]
    assert b4 == pytest.approx(b1 / 2, rel=1e-15)


def test_confidence_constant_reference_value():
    # Independent evaluation of sqrt(2 |X| log(|X||A| N T / delta)) for the four-room sizes.
    value = confidence_constant(SpaceDims(121, 5, 40), 5000, 0.1)
    assert value == pytest.approx(71.14183340037228, rel=1e-14)


def test_bad_delta_rejected():
    with pytest.raises(ConfigurationError):
        bonus_schedule(VisitCounters(DIMS), DIMS, 1.0, 1.0, 10)
    with pytest.raises(ConfigurationError):
        bonus_schedule(VisitCounters(DIMS), DIMS, 0.0, 1.0, 10)


def test_bonuses_non_increasing_over_episodes(rng):
    counters = VisitCounters(DIMS)
    previous = bonus_schedule(counters, DIMS, 0.1, 1.0, 100)
    for _ in range(20):
        counters.update(random_trajectory(rng))
        current = bonus_schedule(counters, DIMS, 0.1, 1.0, 100)
        assert np.all(current.slack <= previous.slack)
        assert np.all(current.gradient <= previous.gradient)
        previous = current


def test_bonus_scale_multiplies_constant():
    base = bonus_schedule(VisitCounters(DIMS), DIMS, 0.1, 1.0, 100)
    small = bonus_schedule(VisitCounters(DIMS), DIMS, 0.1, 1.0, 100, scale=1e-3)
    assert small.c_delta == pytest.approx(1e-3 * base.c_delta)


# ---------------------------------------------------------------------------
# propagate_rho_tilde


def test_periodic_policy_fixed_point():
    # Swap kernel over an even horizon returns every start to itself.
    rho = state_distribution([0.25, 0.75])
    out = propagate_rho_tilde(rho, one_action_policy(2, 2), swap_kernel(2))
    assert np.max(np.abs(out.mass - rho.mass)) <= 1e-12


def test_swap_kernel_one_step_exchanges():
    out = propagate_rho_tilde(state_distribution([0.2, 0.8]), one_action_policy(1, 2), swap_kernel(1))
    assert np.allclose(out.state_marginal, [0.8, 0.2], atol=1e-15)


def test_propagation_matches_transition_matrix(rng):
    policy = oracles.random_policy(rng, DIMS)
    kernel = oracles.random_kernel(rng, DIMS)
    rho = oracles.random_distribution(rng, DIMS.num_states, DIMS.num_actions)
    out = propagate_rho_tilde(rho, policy, kernel)
    expected = rho.mass.ravel() @ episode_transition_matrix(policy, kernel)
    assert np.max(np.abs(out.mass.ravel() - expected)) <= 1e-12


# ---------------------------------------------------------------------------
# Concentration of the estimate (small version of the acceptance check)


def test_concentration_bound_holds_on_small_chain():
    dims = SpaceDims(3, 2, 3)
    rng = np.random.default_rng(4)
    kernel = oracles.random_kernel(rng, dims)
    policy = Policy.uniform(dims)
    counters = VisitCounters(dims)
    c_delta = confidence_constant(dims, 50, 0.1)
    for _ in range(50):
        counters.update(sample_trajectory(policy, kernel, (0, 0), rng))
        estimate = empirical_kernel(counters)
        dev = np.abs(estimate.probs - kernel.probs).sum(axis=-1)
        visited = counters.pair_counts >= 1
        bound = c_delta / np.sqrt(np.maximum(1, counters.pair_counts))
        assert np.all(dev[visited] <= bound[visited])
    assert math.isfinite(c_delta)
