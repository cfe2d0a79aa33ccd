"""Tabular MDP primitives: kernels, policies, occupancy rollouts and sampling.

Array conventions used throughout the package (``N`` is the horizon):

* ``TransitionKernel.probs[k]`` is the kernel of step ``k + 1``, shape ``(N, X, A, X)``.
* ``Policy.action_probs[k]`` is the policy of step ``k + 1``, shape ``(N, X, A)``.
* ``OccupancyMeasure.slices[n]`` is the state-action distribution at step ``n``,
  shape ``(N + 1, X, A)``; slice 0 is the initial distribution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigurationError

SIMPLEX_ATOL = 1e-12
LONG_PRODUCT_ATOL = 1e-10
RENORMALIZATION_LIMIT = 1e-9
ZERO_MASS = 1e-15


def _frozen(array, dtype=np.float64):
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _check_simplex(array, axis, atol, what):
    if not np.all(np.isfinite(array)):
        raise ConfigurationError(f"{what} has non-finite entries")
    if np.any(array < -atol):
        raise ConfigurationError(f"{what} has negative entries (min {array.min():.3e})")
    dev = np.abs(array.sum(axis=axis) - 1.0).max() if array.size else 0.0
    if dev > atol:
        raise ConfigurationError(f"{what} does not sum to one (max deviation {dev:.3e})")


@dataclass(frozen=True)
class SpaceDims:
    num_states: int
    num_actions: int
    horizon: int

    def __post_init__(self):
        for name in ("num_states", "num_actions", "horizon"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")

    @property
    def shape(self):
        return (self.num_states, self.num_actions)


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 4 or probs.shape[1] != probs.shape[3]:
            raise ConfigurationError(f"kernel must have shape (N, X, A, X), got {probs.shape}")
        _check_simplex(probs, -1, SIMPLEX_ATOL, "transition kernel")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def stationary(cls, probs, horizon):
        """Replicate a single ``(X, A, X)`` kernel across ``horizon`` steps (a read-only view)."""
        probs = _frozen(probs)
        if probs.ndim != 3 or probs.shape[0] != probs.shape[2]:
            raise ConfigurationError(f"stationary kernel must have shape (X, A, X), got {probs.shape}")
        if int(horizon) != horizon or horizon < 1:
            raise ConfigurationError(f"horizon must be a positive integer, got {horizon!r}")
        _check_simplex(probs, -1, SIMPLEX_ATOL, "transition kernel")
        kernel = object.__new__(cls)
        object.__setattr__(kernel, "probs", np.broadcast_to(probs, (int(horizon),) + probs.shape))
        return kernel

    @property
    def dims(self):
        n, x, a, _ = self.probs.shape
        return SpaceDims(x, a, n)


@dataclass(frozen=True, eq=False)
class Policy:
    action_probs: np.ndarray

    def __post_init__(self):
        probs = _frozen(self.action_probs)
        if probs.ndim != 3:
            raise ConfigurationError(f"policy must have shape (N, X, A), got {probs.shape}")
        _check_simplex(probs, -1, SIMPLEX_ATOL, "policy")
        object.__setattr__(self, "action_probs", probs)

    @classmethod
    def uniform(cls, dims: SpaceDims):
        shape = (dims.horizon, dims.num_states, dims.num_actions)
        return cls(np.full(shape, 1.0 / dims.num_actions))

    @property
    def dims(self):
        n, x, a = self.action_probs.shape
        return SpaceDims(x, a, n)

    def mixed_with_uniform(self, rate):
        """Return ``(1 - rate) * pi + rate * uniform``; keeps every entry positive."""
        if rate <= 0.0:
            return self
        a = self.action_probs.shape[-1]
        return Policy((1.0 - rate) * self.action_probs + rate / a)


@dataclass(frozen=True, eq=False)
class Distribution:
    mass: np.ndarray

    def __post_init__(self):
        mass = _frozen(self.mass)
        if mass.ndim != 2:
            raise ConfigurationError(f"distribution must have shape (X, A), got {mass.shape}")
        _check_simplex(mass, None, SIMPLEX_ATOL, "distribution")
        object.__setattr__(self, "mass", mass)

    @classmethod
    def dirac(cls, dims: SpaceDims, state, action):
        mass = np.zeros(dims.shape)
        mass[state, action] = 1.0
        return cls(mass)

    @classmethod
    def renormalized(cls, mass):
        """Clip rounding noise and renormalize a slice produced by a long product.

        The correction is asserted to stay below ``RENORMALIZATION_LIMIT``.
        """
        mass = np.asarray(mass, dtype=np.float64)
        clipped = np.where(mass < 0.0, 0.0, mass)
        total = clipped.sum()
        drift = abs(total - 1.0) + float(np.abs(clipped - mass).sum())
        if drift >= RENORMALIZATION_LIMIT:
            raise ConfigurationError(f"renormalization of {drift:.3e} exceeds the drift limit")
        return cls(clipped / total)

    @property
    def state_marginal(self):
        return self.mass.sum(axis=1)

    def l1(self, other: "Distribution") -> float:
        return float(np.abs(self.mass - other.mass).sum())


@dataclass(frozen=True, eq=False)
class OccupancyMeasure:
    slices: np.ndarray

    def __post_init__(self):
        slices = _frozen(self.slices)
        if slices.ndim != 3 or slices.shape[0] < 2:
            raise ConfigurationError(f"occupancy must have shape (N + 1, X, A), got {slices.shape}")
        _check_simplex(slices.reshape(slices.shape[0], -1), 1, LONG_PRODUCT_ATOL, "occupancy slice")
        object.__setattr__(self, "slices", slices)

    @property
    def horizon(self):
        return self.slices.shape[0] - 1

    @property
    def initial(self):
        return self.slices[0]

    @property
    def terminal(self):
        return self.slices[-1]

    def terminal_distribution(self) -> Distribution:
        return Distribution.renormalized(self.slices[-1])

    def state_marginals(self):
        return self.slices.sum(axis=2)

    def distance(self, other: "OccupancyMeasure") -> float:
        """The ``||.||_{inf,1}`` distance over slices ``1..N``."""
        return float(np.abs(self.slices[1:] - other.slices[1:]).sum(axis=(1, 2)).max())


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray

    def __post_init__(self):
        states = _frozen(self.states, np.int64)
        actions = _frozen(self.actions, np.int64)
        if states.shape != actions.shape or states.ndim != 1 or states.size < 2:
            raise ConfigurationError("trajectory needs matching state/action vectors of length N + 1")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def horizon(self):
        return self.states.size - 1

    @property
    def steps(self):
        return list(zip(self.states.tolist(), self.actions.tolist()))

    def validate(self, dims: SpaceDims):
        if self.horizon != dims.horizon:
            raise ConfigurationError(f"trajectory length {self.states.size} != N + 1 = {dims.horizon + 1}")
        if self.states.min() < 0 or self.states.max() >= dims.num_states:
            raise ConfigurationError("trajectory state index out of range")
        if self.actions.min() < 0 or self.actions.max() >= dims.num_actions:
            raise ConfigurationError("trajectory action index out of range")


def _check_compatible(policy: Policy, kernel: TransitionKernel, init=None):
    pn, px, pa = policy.action_probs.shape
    kn, kx, ka, _ = kernel.probs.shape
    if (pn, px, pa) != (kn, kx, ka):
        raise ConfigurationError(f"policy shape {(pn, px, pa)} does not match kernel shape {(kn, kx, ka)}")
    if init is not None and init.mass.shape != (px, pa):
        raise ConfigurationError(f"initial distribution shape {init.mass.shape} != {(px, pa)}")


def rollout_slices(action_probs, init_mass, kernel_probs):
    """Unchecked forward recursion on raw arrays; returns an ``(N + 1, X, A)`` array."""
    return _kernels.rollout(action_probs, init_mass, kernel_probs)


def forward_rollout(policy: Policy, init: Distribution, kernel: TransitionKernel) -> OccupancyMeasure:
    _check_compatible(policy, kernel, init)
    return OccupancyMeasure(rollout_slices(policy.action_probs, init.mass, kernel.probs))


def episode_transition_matrix(policy: Policy, kernel: TransitionKernel) -> np.ndarray:
    """The N-step map from initial to terminal state-action pairs, as an ``(XA, XA)`` matrix."""
    _check_compatible(policy, kernel)
    horizon, x, a = policy.action_probs.shape
    mat = np.eye(x * a).reshape(x * a, x, a)
    for k in range(horizon):
        marginal = np.tensordot(mat, kernel.probs[k], axes=([1, 2], [0, 1]))
        mat = marginal[:, :, None] * policy.action_probs[k][None]
    return mat.reshape(x * a, x * a)


def policy_from_occupancy(mu: OccupancyMeasure) -> Policy:
    """Condition each slice ``1..N`` on its state; zero-mass states get a uniform row."""
    slices = mu.slices[1:]
    num_actions = slices.shape[-1]
    marginal = slices.sum(axis=-1, keepdims=True)
    support = marginal > ZERO_MASS
    safe = np.where(support, marginal, 1.0)
    probs = np.where(support, slices / safe, 1.0 / num_actions)
    probs = np.clip(probs, 0.0, None)
    return Policy(probs / probs.sum(axis=-1, keepdims=True))


def bellman_flow_residual(mu: OccupancyMeasure, kernel: TransitionKernel, init: Distribution) -> float:
    slices = mu.slices
    if slices.shape[1:] != init.mass.shape or slices.shape[0] != kernel.probs.shape[0] + 1:
        raise ConfigurationError("occupancy, kernel and initial distribution shapes disagree")
    worst = float(np.abs(slices[0] - init.mass).sum())
    for k in range(kernel.probs.shape[0]):
        predicted = np.tensordot(slices[k], kernel.probs[k], axes=([0, 1], [0, 1]))
        worst = max(worst, float(np.abs(slices[k + 1].sum(axis=1) - predicted).max()))
    return worst


def _draw(cdf_row, u):
    idx = int(np.searchsorted(cdf_row, u, side="right"))
    return min(idx, cdf_row.size - 1)


def sample_trajectory(policy: Policy, kernel: TransitionKernel, start, rng: np.random.Generator) -> Trajectory:
    """Sample one episode from ``start = (x_0, a_0)``; consumes ``2N`` uniforms from ``rng``."""
    _check_compatible(policy, kernel)
    horizon, num_states, num_actions = policy.action_probs.shape
    x, a = int(start[0]), int(start[1])
    if not (0 <= x < num_states and 0 <= a < num_actions):
        raise ConfigurationError(f"start {start} outside the state-action space")
    states = np.empty(horizon + 1, dtype=np.int64)
    actions = np.empty(horizon + 1, dtype=np.int64)
    states[0], actions[0] = x, a
    uniforms = rng.random(2 * horizon)
    for k in range(horizon):
        x = _draw(np.cumsum(kernel.probs[k, x, a]), uniforms[2 * k])
        a = _draw(np.cumsum(policy.action_probs[k, x]), uniforms[2 * k + 1])
        states[k + 1], actions[k + 1] = x, a
    return Trajectory(states, actions)


def sample_start(dist: Distribution, rng: np.random.Generator):
    flat = np.cumsum(dist.mass.ravel())
    idx = _draw(flat, rng.random())
    return divmod(idx, dist.mass.shape[1])


def sample_trajectories(policy: Policy, kernel: TransitionKernel, init: Distribution,
                        count: int, rng: np.random.Generator):
    """Vectorised batch sampler; returns ``(states, actions)`` arrays of shape ``(count, N + 1)``."""
    _check_compatible(policy, kernel, init)
    horizon, num_states, num_actions = policy.action_probs.shape
    flat = np.cumsum(init.mass.ravel())
    idx = np.minimum(np.searchsorted(flat, rng.random(count), side="right"), flat.size - 1)
    x, a = np.divmod(idx, num_actions)
    states = np.empty((count, horizon + 1), dtype=np.int64)
    actions = np.empty((count, horizon + 1), dtype=np.int64)
    states[:, 0], actions[:, 0] = x, a
    kernel_cdf = np.cumsum(kernel.probs, axis=-1)
    policy_cdf = np.cumsum(policy.action_probs, axis=-1)
    for k in range(horizon):
        rows = kernel_cdf[k, x, a]
        x = np.minimum((rng.random(count)[:, None] >= rows).sum(axis=1), num_states - 1)
        rows = policy_cdf[k, x]
        a = np.minimum((rng.random(count)[:, None] >= rows).sum(axis=1), num_actions - 1)
        states[:, k + 1], actions[:, k + 1] = x, a
    return states, actions
