"""Brute-force reference computations used by the tests and the ``oracle`` subcommand.

Everything here is deliberately naive: trajectory enumeration, exhaustive
policy grids and explicit Monte-Carlo. The code shares no numerical path with
the dynamic-programming solver beyond the data containers.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .estimation import BonusSchedule
from .mdp import Distribution, OccupancyMeasure, Policy, SpaceDims, TransitionKernel, forward_rollout
from .solver import EpisodeProblem

GRID_STEP = 0.02
GRID_CHUNK = 200_000


# ---------------------------------------------------------------------------
# Random instances


def random_kernel(rng, dims: SpaceDims, concentration: float = 0.5) -> TransitionKernel:
    shape = (dims.horizon, dims.num_states, dims.num_actions)
    return TransitionKernel(rng.dirichlet(np.full(dims.num_states, concentration), size=shape))


def random_policy(rng, dims: SpaceDims) -> Policy:
    return Policy(rng.dirichlet(np.ones(dims.num_actions), size=(dims.horizon, dims.num_states)))


def random_distribution(rng, num_states: int, num_actions: int) -> Distribution:
    mass = rng.dirichlet(np.ones(num_states * num_actions)).reshape(num_states, num_actions)
    return Distribution(mass)


def random_problem(rng, dims: SpaceDims, lam_scale: float = 1.0) -> EpisodeProblem:
    """Generic problem: random loss, kernel, prior, start, target and bonuses."""
    kernel = random_kernel(rng, dims)
    shape = (dims.horizon, dims.num_states, dims.num_actions)
    slack = 0.05 * rng.random(shape)
    bonuses = BonusSchedule(slack, 0.1 * rng.random(shape), 0.05, 1.0, 0.1)
    return EpisodeProblem(
        gradient=lam_scale * rng.normal(size=shape),
        bonuses=bonuses,
        prior_policy=random_policy(rng, dims),
        kernel=kernel,
        init=random_distribution(rng, dims.num_states, dims.num_actions),
        target=random_distribution(rng, dims.num_states, dims.num_actions),
        eta=float(rng.uniform(0.2, 2.0)),
        alpha_bar=float(rng.uniform(0.0, 0.5)),
    )


def slack_instance(rng, max_states: int = 10, max_actions: int = 4, max_horizon: int = 10) -> EpisodeProblem:
    """Random problem that is strictly feasible.

    The target is the terminal law of another random policy and the contraction
    slack ``alpha_bar ||ref_init - rho||_1`` is positive, so a point with ``G < 0``
    exists and dual ascent terminates.
    """
    num_states = int(rng.integers(2, max_states + 1))
    num_actions = int(rng.integers(2, max_actions + 1))
    horizon = int(rng.integers(1, max_horizon + 1))
    dims = SpaceDims(num_states, num_actions, horizon)
    kernel = random_kernel(rng, dims)
    init = random_distribution(rng, num_states, num_actions)
    target = forward_rollout(random_policy(rng, dims), init, kernel).terminal_distribution()
    shape = (horizon, num_states, num_actions)
    counts = rng.integers(0, 400, size=shape)
    slack = 0.05 * rng.random() / np.sqrt(np.maximum(1, counts))
    bonuses = BonusSchedule(slack, 0.1 * slack, 0.05, 1.0, 0.1)
    ref_init = random_distribution(rng, num_states, num_actions)
    return EpisodeProblem(
        gradient=rng.normal(size=shape),
        bonuses=bonuses,
        prior_policy=random_policy(rng, dims),
        kernel=kernel,
        init=init,
        target=target,
        eta=float(rng.uniform(0.1, 2.0)),
        alpha_bar=float(rng.uniform(0.0, 0.9)),
        ref_init=ref_init,
    )


def contraction_instance(contraction: float = 0.9) -> EpisodeProblem:
    """Two-state chain whose best achievable contraction factor is ``contraction``.

    State 0 is absorbing; from state 1 every action reaches state 0 with
    probability ``1 - contraction``. Starting at state 1 and targeting state 0,
    ``||mu_1 - rho||_1 = contraction * ||init - rho||_1`` for the best policy, so the
    constraint is feasible exactly when ``alpha_bar >= contraction`` (up to epsilon).
    """
    dims = SpaceDims(2, 2, 1)
    probs = np.zeros((1, 2, 2, 2))
    probs[0, 0, :, 0] = 1.0
    probs[0, 1, :, 0] = 1.0 - contraction
    probs[0, 1, :, 1] = contraction
    start = Distribution.dirac(dims, 1, 0)
    target = Distribution.dirac(dims, 0, 0)
    shape = (1, 2, 2)
    return EpisodeProblem(
        gradient=np.zeros(shape),
        bonuses=BonusSchedule.zeros(dims),
        prior_policy=Policy.uniform(dims),
        kernel=TransitionKernel(probs),
        init=start,
        target=target,
        eta=1.0,
        alpha_bar=0.0,
    )


# ---------------------------------------------------------------------------
# Trajectory enumeration


def enumerate_trajectories(policy: Policy, kernel: TransitionKernel, init: Distribution):
    """Yield ``(states, actions, probability)`` for every trajectory of positive probability."""
    probs = policy.action_probs
    horizon, num_states, num_actions = probs.shape
    starts = [(x, a) for x in range(num_states) for a in range(num_actions) if init.mass[x, a] > 0]
    for x0, a0 in starts:
        stack = [((x0,), (a0,), float(init.mass[x0, a0]))]
        while stack:
            states, actions, weight = stack.pop()
            n = len(states) - 1
            if n == horizon:
                yield states, actions, weight
                continue
            for y in range(num_states):
                p_move = kernel.probs[n, states[-1], actions[-1], y]
                if p_move == 0:
                    continue
                for b in range(num_actions):
                    w = weight * p_move * probs[n, y, b]
                    if w > 0:
                        stack.append((states + (y,), actions + (b,), w))


def occupancy_by_enumeration(policy: Policy, kernel: TransitionKernel, init: Distribution) -> np.ndarray:
    """Occupancy slices ``(N+1, X, A)`` summed over enumerated trajectories."""
    horizon, num_states, num_actions = policy.action_probs.shape
    slices = np.zeros((horizon + 1, num_states, num_actions))
    for states, actions, weight in enumerate_trajectories(policy, kernel, init):
        for n, (x, a) in enumerate(zip(states, actions)):
            slices[n, x, a] += weight
    return slices


def monte_carlo_occupancy(policy: Policy, kernel: TransitionKernel, init: Distribution,
                          num_samples: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Empirical visit frequencies and their standard errors from vectorised sampling."""
    horizon, num_states, num_actions = policy.action_probs.shape
    flat = rng.choice(num_states * num_actions, size=num_samples, p=init.mass.ravel())
    x, a = np.divmod(flat, num_actions)
    freq = np.zeros((horizon + 1, num_states, num_actions))
    np.add.at(freq[0], (x, a), 1.0)
    for n in range(horizon):
        cdf = np.cumsum(kernel.probs[n, x, a], axis=-1)
        x = np.minimum((cdf < rng.random(num_samples)[:, None]).sum(axis=-1), num_states - 1)
        cdf = np.cumsum(policy.action_probs[n, x], axis=-1)
        a = np.minimum((cdf < rng.random(num_samples)[:, None]).sum(axis=-1), num_actions - 1)
        np.add.at(freq[n + 1], (x, a), 1.0)
    freq /= num_samples
    stderr = np.sqrt(freq * (1.0 - freq) / num_samples)
    return freq, stderr


# ---------------------------------------------------------------------------
# Exhaustive policy grid (two actions)


@dataclass(frozen=True)
class GridMinimum:
    value: float
    policy: Policy
    size: int


def _grid_policies(horizon: int, num_states: int, step: float):
    """All two-action policies with ``pi_n(0|x)`` on the grid, in chunks of shape ``(B, N, X, 2)``."""
    levels = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    cells = horizon * num_states
    if cells == 0:
        yield np.zeros((1, 0, num_states, 2))
        return
    combos = itertools.product(range(len(levels)), repeat=cells)
    while True:
        block = np.array(list(itertools.islice(combos, GRID_CHUNK)), dtype=np.int64)
        if block.size == 0:
            return
        first = levels[block].reshape(-1, horizon, num_states)
        yield np.stack([first, 1.0 - first], axis=-1)


def _batch_terms(problem: EpisodeProblem, pis: np.ndarray):
    """Primal objective and constraint value for a batch of policies, computed directly."""
    kernel = problem.kernel.probs
    horizon = pis.shape[1]
    mu = np.empty((pis.shape[0], horizon + 1) + pis.shape[2:])
    mu[:, 0] = problem.init.mass
    for n in range(horizon):
        marginal = np.einsum("bxa,xay->by", mu[:, n], kernel[n])
        mu[:, n + 1] = marginal[:, :, None] * pis[:, n]
    bon = problem.bonuses
    linear = np.einsum("bnxa,nxa->b", mu[:, 1:], problem.gradient)
    linear -= np.einsum("bnxa,nxa->b", mu[:, :-1], bon.gradient)
    prior = problem.prior_policy.action_probs
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(pis > 0, pis * np.log(pis / prior), 0.0)
    state_mass = mu[:, 1:].sum(axis=-1)
    divergence = np.einsum("bnx,bnxa->b", state_mass, ratio)
    objective = linear + divergence / problem.eta if problem.eta > 0 else linear
    drift = np.abs(problem.slack_reference.mass - problem.target.mass).sum()
    terminal = np.abs(mu[:, -1] - problem.target.mass).sum(axis=(-2, -1))
    g = terminal - np.einsum("bnxa,nxa->b", mu[:, :-1], bon.slack) - problem.alpha_bar * drift
    return objective, g


def _check_grid_problem(problem: EpisodeProblem):
    probs = problem.prior_policy.action_probs
    if probs.shape[-1] != 2:
        raise ValueError("the policy grid oracle handles two actions only")
    if problem.prior_occupancy is not None:
        raise ValueError("the policy grid oracle assumes the prior occupancy starts at init")


def grid_lagrangian_minimum(problem: EpisodeProblem, lam: float, step: float = GRID_STEP) -> GridMinimum:
    """Minimum of ``objective + lam * G`` over the exhaustive two-action policy grid.

    The divergence is the policy-space one with the prior occupancy started from
    ``problem.init`` (its initial term then vanishes). Given the earlier steps, the
    Lagrangian separates over states in the last step's policy, so that step is
    minimised state by state over the same grid instead of being enumerated jointly.
    """
    _check_grid_problem(problem)
    horizon, num_states, _ = problem.prior_policy.action_probs.shape
    levels = np.round(np.arange(0.0, 1.0 + step / 2, step), 12)
    last = np.stack([levels, 1.0 - levels], axis=-1)  # (L, 2)
    prior_last = problem.prior_policy.action_probs[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_last = np.where(last[None] > 0, last[None] * np.log(last[None] / prior_last[:, None]), 0.0).sum(-1)
    lin_last = np.einsum("la,xa->xl", last, problem.gradient[-1])
    target = problem.target.mass
    bon = problem.bonuses
    drift = np.abs(problem.slack_reference.mass - target).sum()
    prior = problem.prior_policy.action_probs
    best, best_pi, size = np.inf, None, 0
    for prefix in _grid_policies(horizon - 1, num_states, step):
        batch = prefix.shape[0]
        mu = np.empty((batch, horizon) + target.shape)
        mu[:, 0] = problem.init.mass
        for n in range(horizon - 1):
            marginal = np.einsum("bxa,xay->by", mu[:, n], problem.kernel.probs[n])
            mu[:, n + 1] = marginal[:, :, None] * prefix[:, n]
        m_last = np.einsum("bxa,xay->by", mu[:, -1], problem.kernel.probs[-1])
        value = -np.einsum("bnxa,nxa->b", mu, bon.gradient) - lam * np.einsum("bnxa,nxa->b", mu, bon.slack)
        value -= lam * problem.alpha_bar * drift
        if horizon > 1:
            value += np.einsum("bnxa,nxa->b", mu[:, 1:], problem.gradient[:-1])
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(prefix > 0, prefix * np.log(prefix / prior[:-1]), 0.0)
            if problem.eta > 0:
                value += np.einsum("bnx,bnxa->b", mu[:, 1:].sum(-1), ratio) / problem.eta
        # (B, X, L) candidate costs of the last step, state by state
        cand = m_last[:, :, None] * lin_last[None]
        if problem.eta > 0:
            cand += m_last[:, :, None] * kl_last[None] / problem.eta
        cand += lam * np.abs(m_last[:, :, None, None] * last[None, None] - target[None, :, None, :]).sum(-1)
        choice = cand.argmin(axis=-1)
        totals = value + cand.min(axis=-1).sum(axis=-1)
        i = int(np.argmin(totals))
        size += batch * len(levels) ** num_states
        if totals[i] < best:
            best = float(totals[i])
            best_pi = np.concatenate([prefix[i], last[choice[i]][None]], axis=0)
    return GridMinimum(best, Policy(best_pi), size)


def grid_constrained_minimum(problem: EpisodeProblem, epsilon: float = 1e-3,
                             step: float = GRID_STEP) -> GridMinimum | None:
    """Minimum primal objective over grid policies with ``G <= epsilon``; ``None`` if none qualify."""
    _check_grid_problem(problem)
    horizon, num_states, _ = problem.prior_policy.action_probs.shape
    best, best_pi, size = np.inf, None, 0
    for pis in _grid_policies(horizon, num_states, step):
        objective, g = _batch_terms(problem, pis)
        objective = np.where(g <= epsilon, objective, np.inf)
        i = int(np.argmin(objective))
        size += len(objective)
        if objective[i] < best:
            best, best_pi = float(objective[i]), pis[i]
    if best_pi is None:
        return None
    return GridMinimum(best, Policy(best_pi), size)


def grid_min_terminal_gap(problem: EpisodeProblem, step: float = GRID_STEP) -> float:
    """Smallest ``||mu_N - rho||_1`` reachable by a grid policy (feasibility certificate)."""
    _check_grid_problem(problem)
    horizon, num_states, _ = problem.prior_policy.action_probs.shape
    best = np.inf
    for pis in _grid_policies(horizon, num_states, step):
        zero_slack = EpisodeProblem(problem.gradient, BonusSchedule.zeros(SpaceDims(num_states, 2, horizon)),
                                    problem.prior_policy, problem.kernel, problem.init, problem.target,
                                    problem.eta, 0.0, problem.bregman, problem.target)
        _, g = _batch_terms(zero_slack, pis)
        best = min(best, float(g.min()))
    return best


def grid_periodic_minimum(objective, kernel: TransitionKernel, rho: Distribution, tol: float = 1e-3,
                          step: float = GRID_STEP) -> GridMinimum | None:
    """Minimum of ``objective.value`` over grid policies with ``||mu_N - rho||_1 <= tol`` from ``rho``."""
    horizon, num_states, num_actions, _ = kernel.probs.shape
    if num_actions != 2:
        raise ValueError("the policy grid oracle handles two actions only")
    best, best_pi, size = np.inf, None, 0
    for pis in _grid_policies(horizon, num_states, step):
        mu = np.empty((pis.shape[0], horizon + 1, num_states, 2))
        mu[:, 0] = rho.mass
        for n in range(horizon):
            marginal = np.einsum("bxa,xay->by", mu[:, n], kernel.probs[n])
            mu[:, n + 1] = marginal[:, :, None] * pis[:, n]
        gap = np.abs(mu[:, -1] - rho.mass).sum(axis=(-2, -1))
        values = objective.step_value(mu[:, 1:]).sum(axis=1)
        values = np.where(gap <= tol, values, np.inf)
        i = int(np.argmin(values))
        size += len(values)
        if values[i] < best:
            best, best_pi = float(values[i]), pis[i]
    if best_pi is None:
        return None
    return GridMinimum(best, Policy(best_pi), size)


def occupancy_from_slices(slices) -> OccupancyMeasure:
    return OccupancyMeasure(np.asarray(slices, dtype=np.float64))
