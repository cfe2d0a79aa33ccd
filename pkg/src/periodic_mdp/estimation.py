"""Visit counters, empirical kernels, exploration bonuses and start-distribution tracking."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .mdp import Distribution, Policy, SpaceDims, TransitionKernel, Trajectory, forward_rollout

DEFAULT_DELTA = 0.1


class VisitCounters:
    """Pair counts ``N_n(x, a)`` and triple counts ``M_n(x' | x, a)`` for ``n = 0..N-1``.

    ``update`` mutates in place; ``update_counts`` is the copying variant.
    """

    def __init__(self, dims: SpaceDims, pair_counts=None, triple_counts=None):
        self.dims = dims
        n, x, a = dims.horizon, dims.num_states, dims.num_actions
        if pair_counts is None:
            pair_counts = np.zeros((n, x, a), dtype=np.int64)
        if triple_counts is None:
            triple_counts = np.zeros((n, x, a, x), dtype=np.int64)
        self.pair_counts = np.array(pair_counts, dtype=np.int64)
        self.triple_counts = np.array(triple_counts, dtype=np.int64)
        if self.pair_counts.shape != (n, x, a) or self.triple_counts.shape != (n, x, a, x):
            raise ConfigurationError("counter arrays do not match the space dimensions")
        self.check_consistency()

    def check_consistency(self):
        if not np.array_equal(self.triple_counts.sum(axis=-1), self.pair_counts):
            raise ConfigurationError("triple counts do not marginalise to pair counts")
        if np.any(self.pair_counts < 0):
            raise ConfigurationError("negative visit count")

    def copy(self):
        return VisitCounters(self.dims, self.pair_counts, self.triple_counts)

    def update(self, traj: Trajectory):
        traj.validate(self.dims)
        steps = np.arange(self.dims.horizon)
        x, a, nxt = traj.states[:-1], traj.actions[:-1], traj.states[1:]
        np.add.at(self.pair_counts, (steps, x, a), 1)
        np.add.at(self.triple_counts, (steps, x, a, nxt), 1)
        self.check_consistency()
        return self

    @property
    def total_visits(self):
        return int(self.pair_counts[0].sum())

    def to_arrays(self):
        return {"pair_counts": self.pair_counts, "triple_counts": self.triple_counts}


def update_counts(counters: VisitCounters, traj: Trajectory) -> VisitCounters:
    return counters.copy().update(traj)


def empirical_kernel(counters: VisitCounters, dims: SpaceDims | None = None,
                     pooled: bool = False) -> TransitionKernel:
    """Count-ratio estimate; rows of never-visited pairs stay uniform over states.

    With ``pooled`` the counts of all steps are merged into one stationary estimate.
    """
    dims = dims or counters.dims
    pair_counts, triple_counts = counters.pair_counts, counters.triple_counts
    if pooled:
        pair_counts, triple_counts = pair_counts.sum(axis=0), triple_counts.sum(axis=0)
    pairs = pair_counts[..., None].astype(np.float64)
    probs = np.where(pairs > 0, triple_counts / np.maximum(pairs, 1.0), 1.0 / dims.num_states)
    if pooled:
        return TransitionKernel.stationary(probs, dims.horizon)
    return TransitionKernel(probs)


@dataclass(frozen=True, eq=False)
class BonusSchedule:
    """Constraint-slack bonus ``slack`` and gradient bonus ``gradient`` on steps ``0..N-1``."""

    slack: np.ndarray
    gradient: np.ndarray
    c_delta: float
    lipschitz: float
    delta: float

    @classmethod
    def zeros(cls, dims: SpaceDims):
        shape = (dims.horizon, dims.num_states, dims.num_actions)
        return cls(np.zeros(shape), np.zeros(shape), 0.0, 1.0, DEFAULT_DELTA)

    def scaled(self, factor):
        return BonusSchedule(self.slack * factor, self.gradient * factor,
                             self.c_delta * factor, self.lipschitz, self.delta)


def confidence_constant(dims: SpaceDims, num_episodes: int, delta: float) -> float:
    """``sqrt(2 |X| log(|X||A| N T / delta))``."""
    if not 0.0 < delta < 1.0:
        raise ConfigurationError(f"delta must lie in (0, 1), got {delta}")
    if num_episodes < 1:
        raise ConfigurationError("num_episodes must be positive")
    inner = dims.num_states * dims.num_actions * dims.horizon * num_episodes / delta
    return math.sqrt(2.0 * dims.num_states * math.log(inner))


def bonus_schedule(counters: VisitCounters, dims: SpaceDims, delta: float, lipschitz: float,
                   num_episodes: int, scale: float = 1.0, pooled: bool = False) -> BonusSchedule:
    """Bonuses ``b = C / sqrt(max(1, N_n))`` and ``b_bar = lipschitz * (N - n) * b``.

    ``scale`` multiplies the confidence constant; 1.0 gives the high-probability value.
    With ``pooled`` the count of a pair is its total over all steps.
    """
    if lipschitz <= 0:
        raise ConfigurationError("lipschitz constant must be positive")
    c_delta = confidence_constant(dims, num_episodes, delta) * scale
    counts = counters.pair_counts
    if pooled:
        counts = np.broadcast_to(counts.sum(axis=0), counts.shape)
    slack = c_delta / np.sqrt(np.maximum(1, counts))
    remaining = (dims.horizon - np.arange(dims.horizon)).astype(np.float64)
    gradient = lipschitz * remaining[:, None, None] * slack
    return BonusSchedule(slack, gradient, c_delta, lipschitz, delta)


def propagate_rho_tilde(rho_tilde: Distribution, policy: Policy, tilde_kernel: TransitionKernel) -> Distribution:
    """Push the estimated start distribution through one episode of the estimated model."""
    return forward_rollout(policy, rho_tilde, tilde_kernel).terminal_distribution()


def kernel_l1_deviation(true_kernel: TransitionKernel, estimate: TransitionKernel) -> np.ndarray:
    """Row-wise ``||p_n(.|x,a) - p_hat_n(.|x,a)||_1``, shape ``(N, X, A)``."""
    return np.abs(true_kernel.probs - estimate.probs).sum(axis=-1)
