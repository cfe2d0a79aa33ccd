"""Constrained mirror-descent step over occupancy measures, solved by Lagrangian duality.

One episode solves::

    min_{mu in M(kernel, init)}  <l - b_bar, mu> + D(mu, mu_prev) / eta
    s.t.  G(mu) = ||mu_N - rho||_1 - <mu, b> - alpha_bar ||ref_init - rho||_1 <= 0

For a fixed multiplier the policy-space divergence admits a backward soft
Bellman recursion with a closed-form softmax policy; the multiplier itself is
found by projected dual gradient ascent.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from . import _kernels
from .errors import ConfigurationError, DomainError, DualAscentError, InfeasibleError
from .estimation import BonusSchedule
from .mdp import (Distribution, OccupancyMeasure, Policy, TransitionKernel, forward_rollout,
                  policy_from_occupancy, rollout_slices)

KL_REFERENCE_FLOOR = 1e-12
DIRAC_TOL = 1e-15
# Projected-gradient tolerance of the terminal-weight refinement; the gradient is
# lam * (mu_N - rho), so this bounds the per-entry terminal mismatch it leaves behind.
TERMINAL_GTOL = 1e-8


class BregmanKind(enum.Enum):
    KL_OCCUPANCY = "kl_occupancy"
    POLICY_GAMMA = "policy_gamma"


@dataclass(frozen=True, eq=False)
class EpisodeProblem:
    gradient: np.ndarray
    bonuses: BonusSchedule
    prior_policy: Policy
    kernel: TransitionKernel
    init: Distribution
    target: Distribution
    eta: float
    alpha_bar: float
    bregman: BregmanKind = BregmanKind.POLICY_GAMMA
    ref_init: Distribution | None = None
    prior_occupancy: OccupancyMeasure | None = None

    def __post_init__(self):
        grad = np.asarray(self.gradient, dtype=np.float64)
        shape = self.prior_policy.action_probs.shape
        if grad.shape != shape:
            raise ConfigurationError(f"gradient shape {grad.shape} != policy shape {shape}")
        if not np.all(np.isfinite(grad)):
            raise ConfigurationError("gradient has non-finite entries")
        if self.kernel.probs.shape[:3] != shape:
            raise ConfigurationError("kernel and policy shapes disagree")
        if self.bonuses.slack.shape != shape or self.bonuses.gradient.shape != shape:
            raise ConfigurationError("bonus shapes disagree with the policy")
        for dist in (self.init, self.target, self.ref_init):
            if dist is not None and dist.mass.shape != shape[1:]:
                raise ConfigurationError("distribution shape disagrees with the policy")
        if not self.eta >= 0.0:
            raise ConfigurationError(f"eta must be non-negative, got {self.eta}")
        if not 0.0 <= self.alpha_bar < 1.0:
            raise ConfigurationError(f"alpha_bar must lie in [0, 1), got {self.alpha_bar}")
        object.__setattr__(self, "gradient", grad)

    @property
    def slack_reference(self) -> Distribution:
        return self.ref_init if self.ref_init is not None else self.init

    @property
    def horizon(self):
        return self.gradient.shape[0]

    def reference_occupancy(self) -> OccupancyMeasure:
        if self.prior_occupancy is not None:
            return self.prior_occupancy
        return forward_rollout(self.prior_policy, self.init, self.kernel)


@dataclass(frozen=True)
class DualState:
    lam: float = 0.0
    eta_lambda: float = 0.01
    epsilon: float = 1e-3
    max_iters: int = 5000

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("lambda must be non-negative")
        if self.eta_lambda <= 0 or self.epsilon <= 0 or self.max_iters < 1:
            raise ConfigurationError("eta_lambda, epsilon and max_iters must be positive")


@dataclass(frozen=True, eq=False)
class QTable:
    values: np.ndarray


@dataclass(frozen=True)
class DualDiagnostics:
    lambda_final: float
    dual_iters: int
    g_final: float
    alpha_bar: float
    lambda_trace: tuple = field(default=(), repr=False)


# ---------------------------------------------------------------------------
# Divergences and objective pieces


def _xlogy_ratio(weights, num, den):
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = weights * (np.log(num) - np.log(den))
    return np.where(weights > 0, terms, 0.0)


def bregman_divergence(kind: BregmanKind, mu: OccupancyMeasure, ref: OccupancyMeasure,
                       policy: Policy | None = None, ref_policy: Policy | None = None,
                       floor: float | None = None) -> float:
    """``KL(mu || ref)`` summed over all slices, or the policy-space divergence Gamma.

    Gamma needs the policies inducing ``mu`` and ``ref``; when omitted they are
    extracted from the occupancies. ``floor`` lifts zero reference entries.
    """
    if mu.slices.shape != ref.slices.shape:
        raise ConfigurationError("occupancy shapes disagree")
    if kind is BregmanKind.KL_OCCUPANCY:
        refs = ref.slices if floor is None else np.maximum(ref.slices, floor)
        if np.any((refs <= 0) & (mu.slices > 0)):
            raise DomainError("reference occupancy has zero entries; pass a floor")
        return float(_xlogy_ratio(mu.slices, mu.slices, refs).sum())
    policy = policy if policy is not None else policy_from_occupancy(mu)
    ref_policy = ref_policy if ref_policy is not None else policy_from_occupancy(ref)
    ref_probs = ref_policy.action_probs
    ref_init = ref.slices[0]
    if floor is not None:
        ref_probs = np.maximum(ref_probs, floor)
        ref_init = np.maximum(ref_init, floor)
    if np.any((ref_probs <= 0) & (mu.slices[1:] > 0)) or np.any((ref_init <= 0) & (mu.slices[0] > 0)):
        raise DomainError("reference policy or initial distribution has zero entries; pass a floor")
    policy_part = _xlogy_ratio(mu.slices[1:], policy.action_probs, ref_probs).sum()
    init_part = _xlogy_ratio(mu.slices[0], mu.slices[0], ref_init).sum()
    return float(policy_part + init_part)


def terminal_q(lam: float, adjusted_terminal, target: Distribution) -> np.ndarray:
    """Terminal soft value ``l_N + 2 lam (1 - rho)``; exact for Dirac targets."""
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return np.asarray(adjusted_terminal, dtype=np.float64) + 2.0 * lam * (1.0 - target.mass)


def adjusted_loss(problem: EpisodeProblem, lam: float) -> np.ndarray:
    """``l - b_bar - lam * b`` on steps ``1..N``; bonuses live on steps ``0..N-1``."""
    adjusted = problem.gradient.copy()
    adjusted[:-1] -= problem.bonuses.gradient[1:] + lam * problem.bonuses.slack[1:]
    return adjusted


def bonus_inner_product(mu: OccupancyMeasure, bonuses: BonusSchedule) -> float:
    return float((mu.slices[:-1] * bonuses.slack).sum())


def constraint_value(mu: OccupancyMeasure, target: Distribution, bonuses: BonusSchedule,
                     alpha_bar: float, ref_init: Distribution) -> float:
    terminal_gap = float(np.abs(mu.slices[-1] - target.mass).sum())
    drift = float(np.abs(ref_init.mass - target.mass).sum())
    return terminal_gap - bonus_inner_product(mu, bonuses) - alpha_bar * drift


def linear_objective(problem: EpisodeProblem, mu: OccupancyMeasure) -> float:
    """``sum_{n=1..N} <l_n, mu_n> - sum_{n=0..N-1} <b_bar_n, mu_n>``."""
    loss = float((problem.gradient * mu.slices[1:]).sum())
    return loss - float((problem.bonuses.gradient * mu.slices[:-1]).sum())


def md_objective(problem: EpisodeProblem, mu: OccupancyMeasure, policy: Policy | None = None) -> float:
    """Primal objective ``<l - b_bar, mu> + D(mu, mu_prev) / eta``."""
    value = linear_objective(problem, mu)
    if problem.eta > 0:
        value += divergence_to_prior(problem, mu, policy) / problem.eta
    return value


def divergence_to_prior(problem: EpisodeProblem, mu: OccupancyMeasure, policy: Policy | None = None) -> float:
    ref = problem.reference_occupancy()
    if problem.bregman is BregmanKind.KL_OCCUPANCY:
        return bregman_divergence(problem.bregman, mu, ref, floor=KL_REFERENCE_FLOOR)
    return bregman_divergence(problem.bregman, mu, ref, policy=policy, ref_policy=problem.prior_policy)


def lagrangian_value(problem: EpisodeProblem, mu: OccupancyMeasure, lam: float,
                     policy: Policy | None = None) -> float:
    g = constraint_value(mu, problem.target, problem.bonuses, problem.alpha_bar, problem.slack_reference)
    return md_objective(problem, mu, policy) + lam * g


# ---------------------------------------------------------------------------
# Fixed-multiplier minimisation


def _soft_backward(costs, log_prior, kernel_probs, eta):
    """Backward soft Bellman recursion; ``costs[-1]`` already holds the terminal term.

    ``pi_k ~ prior_k * exp(-eta Q_k)``, ``V_k = -(1/eta) log sum_a prior_k exp(-eta Q_k)``
    and ``Q_{k-1} = cost_{k-1} + P_k V_k``. Returns ``(Q, policy, V1)`` where ``V1`` is
    the soft value of step 1 per state.
    """
    return _kernels.soft_backward(costs, log_prior, kernel_probs, float(eta))


def _is_dirac(dist: Distribution):
    return dist.mass.max() >= 1.0 - DIRAC_TOL


class _GammaMinimizer:
    """Closed-form minimiser of the Lagrangian for the policy divergence."""

    def __init__(self, problem: EpisodeProblem):
        probs = problem.prior_policy.action_probs
        if problem.eta > 0 and np.any(probs <= 0):
            raise DomainError("prior policy must be strictly positive; mix it with uniform first")
        with np.errstate(divide="ignore"):
            self.log_prior = np.log(probs)
        self.problem = problem
        self.first_marginal = np.tensordot(problem.init.mass, problem.kernel.probs[0], axes=([0, 1], [0, 1]))
        self.w_guess = None

    def solve_terminal(self, costs, terminal_extra):
        costs = costs.copy()
        costs[-1] = costs[-1] + terminal_extra
        q, probs, v1 = _soft_backward(costs, self.log_prior, self.problem.kernel.probs, self.problem.eta)
        return q, probs, float(self.first_marginal @ v1)


class _KLMinimizer:
    """Dual (flow-multiplier) solver for the Lagrangian with the occupancy KL divergence."""

    def __init__(self, problem: EpisodeProblem):
        if problem.eta <= 0:
            raise ConfigurationError("the occupancy KL step needs eta > 0")
        self.problem = problem
        ref = problem.reference_occupancy().slices[1:]
        self.log_ref = np.log(np.maximum(ref, KL_REFERENCE_FLOOR))
        self.kernel = problem.kernel.probs
        self.first_marginal = np.tensordot(problem.init.mass, self.kernel[0], axes=([0, 1], [0, 1]))
        self.v_guess = None
        self.w_guess = None

    def _log_mu(self, v, costs):
        eta = self.problem.eta
        advantage = costs - v[:, :, None]
        for k in range(costs.shape[0] - 1):
            advantage[k] += self.kernel[k + 1] @ v[k + 1]
        return self.log_ref - eta * advantage, advantage

    def _dual(self, flat, costs):
        horizon, num_states = costs.shape[0], costs.shape[1]
        v = flat.reshape(horizon, num_states)
        log_mu, _ = self._log_mu(v, costs)
        mu = np.exp(log_mu)
        eta = self.problem.eta
        value = float(v[0] @ self.first_marginal) - (mu.sum() - np.exp(self.log_ref).sum()) / eta
        grad = np.empty_like(v)
        grad[0] = self.first_marginal - mu[0].sum(axis=1)
        for k in range(1, horizon):
            grad[k] = np.tensordot(mu[k - 1], self.kernel[k], axes=([0, 1], [0, 1])) - mu[k].sum(axis=1)
        return -value, -grad.ravel()

    def solve_terminal(self, costs, terminal_extra):
        costs = costs.copy()
        costs[-1] = costs[-1] + terminal_extra
        horizon, num_states = costs.shape[0], costs.shape[1]
        start = self.v_guess if self.v_guess is not None else np.zeros(horizon * num_states)
        res = minimize(self._dual, start, args=(costs,), jac=True, method="L-BFGS-B",
                       options={"maxiter": 5000, "gtol": 1e-12, "ftol": 1e-15})
        self.v_guess = res.x
        v = res.x.reshape(horizon, num_states)
        log_mu, advantage = self._log_mu(v, costs)
        mu = np.exp(log_mu)
        marg = mu.sum(axis=2, keepdims=True)
        probs = np.where(marg > 0, mu / np.where(marg > 0, marg, 1.0), 1.0 / mu.shape[2])
        probs /= probs.sum(axis=2, keepdims=True)
        q = advantage + v[:, :, None]
        return q, probs, -float(res.fun)


def _make_minimizer(problem):
    if problem.bregman is BregmanKind.POLICY_GAMMA:
        return _GammaMinimizer(problem)
    return _KLMinimizer(problem)


def _terminal_weight(minimizer, costs, lam, target, exact_terminal):
    """Return the terminal weight ``w`` and the policy solving the inner problem for it.

    The L1 penalty ``lam ||mu_N - rho||_1`` equals ``max_{|w|<=1} lam <w, mu_N - rho>``.
    For a Dirac target the maximiser is ``1 - 2 rho`` (the closed-form terminal
    value); otherwise it is found by L-BFGS-B on the concave dual function.
    """
    closed = 1.0 - 2.0 * target.mass
    if lam == 0.0:
        return closed, minimizer.solve_terminal(costs, 0.0 * closed)
    if not exact_terminal or _is_dirac(target):
        extra = terminal_q(lam, np.zeros_like(target.mass), target)
        return closed, minimizer.solve_terminal(costs, extra)
    problem = minimizer.problem
    shape = target.mass.shape

    def neg_dual(flat):
        w = flat.reshape(shape)
        q, probs, value = minimizer.solve_terminal(costs, lam * w)
        terminal = rollout_slices(probs, problem.init.mass, problem.kernel.probs)[-1]
        h = value - lam * float((w * target.mass).sum())
        return -h, -(lam * (terminal - target.mass)).ravel()

    start = minimizer.w_guess if minimizer.w_guess is not None else closed.ravel()
    res = minimize(neg_dual, start, jac=True, method="L-BFGS-B",
                   bounds=[(-1.0, 1.0)] * closed.size,
                   options={"maxiter": 500, "gtol": TERMINAL_GTOL, "ftol": 1e-13})
    minimizer.w_guess = res.x
    w = res.x.reshape(shape)
    return w, minimizer.solve_terminal(costs, lam * w)


def _minimize_lagrangian(minimizer, problem, lam, exact_terminal):
    costs = adjusted_loss(problem, lam)
    _, (q, probs, _) = _terminal_weight(minimizer, costs, lam, problem.target, exact_terminal)
    policy = Policy(probs)
    mu = forward_rollout(policy, problem.init, problem.kernel)
    return QTable(q), policy, mu


def backward_q_and_policy(problem: EpisodeProblem, lam: float, exact_terminal: bool = True):
    """Minimise the Lagrangian at multiplier ``lam``; returns ``(QTable, Policy, OccupancyMeasure)``.

    With ``exact_terminal=False`` the terminal value is always ``l_N + 2 lam (1 - rho)``,
    which is exact only when the target is a Dirac mass.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    return _minimize_lagrangian(_make_minimizer(problem), problem, lam, exact_terminal)


# ---------------------------------------------------------------------------
# Dual ascent and the contraction search


@dataclass(frozen=True, eq=False)
class DualResult:
    occupancy: OccupancyMeasure
    policy: Policy
    q: QTable
    lam: float
    iterations: int
    g: float
    lambda_trace: tuple


def dual_ascent(problem: EpisodeProblem, dual: DualState, exact_terminal: bool = True) -> DualResult:
    """Gradient ascent on the multiplier until ``G(mu_lambda) <= epsilon``."""
    minimizer = _make_minimizer(problem)
    ref = problem.slack_reference
    lam = float(dual.lam)
    trace = []
    g = float("nan")
    result = None
    for it in range(1, dual.max_iters + 1):
        trace.append(lam)
        q, policy, mu = _minimize_lagrangian(minimizer, problem, lam, exact_terminal)
        g = constraint_value(mu, problem.target, problem.bonuses, problem.alpha_bar, ref)
        result = DualResult(mu, policy, q, lam, it, g, tuple(trace))
        if g <= dual.epsilon:
            return result
        lam = lam + dual.eta_lambda * g
    raise DualAscentError(
        f"dual ascent did not reach G <= {dual.epsilon} in {dual.max_iters} iterations "
        f"(last G = {g:.4g}, lambda = {lam:.4g}); the problem may be infeasible or eta_lambda too small",
        last_g=g, lam=lam, iterations=dual.max_iters, last_result=result)


LAMBDA_CAP = 1e9  # bracketing gives up beyond this multiplier


def bisection_multiplier(problem: EpisodeProblem, dual: DualState, exact_terminal: bool = True,
                         rel_tol: float = 1e-3) -> DualResult:
    """Smallest multiplier (to relative precision ``rel_tol``) with ``G(mu_lambda) <= epsilon``.

    ``G(mu_lambda)`` is non-increasing in ``lambda``, so doubling from ``max(dual.lam, 1)``
    brackets the threshold and bisection narrows it. ``dual.max_iters`` bounds the
    number of Lagrangian solves. Much faster than gradient steps when ``G`` decays
    slowly in ``lambda``.
    """
    minimizer = _make_minimizer(problem)
    ref = problem.slack_reference
    trace = []

    def evaluate(lam):
        trace.append(lam)
        q, policy, mu = _minimize_lagrangian(minimizer, problem, lam, exact_terminal)
        g = constraint_value(mu, problem.target, problem.bonuses, problem.alpha_bar, ref)
        return DualResult(mu, policy, q, lam, len(trace), g, tuple(trace))

    best = evaluate(0.0)
    if best.g <= dual.epsilon:
        return best
    lo, hi = 0.0, max(float(dual.lam), 1.0)
    while True:
        if len(trace) >= dual.max_iters or hi > LAMBDA_CAP:
            raise DualAscentError(
                f"multiplier bracketing reached lambda = {hi:.4g} without G <= {dual.epsilon}",
                last_g=best.g, lam=hi, iterations=len(trace), last_result=best)
        best = evaluate(hi)
        if best.g <= dual.epsilon:
            break
        lo, hi = hi, 2.0 * hi
    while hi - lo > rel_tol * hi and len(trace) < dual.max_iters:
        mid = 0.5 * (lo + hi)
        result = evaluate(mid)
        if result.g <= dual.epsilon:
            hi, best = mid, result
        else:
            lo = mid
    return replace(best, iterations=len(trace), lambda_trace=tuple(trace))


def contraction_grid(cap_exponent: int = 10):
    """``1/2, 3/4, 7/8, ..., 1 - 2^-cap_exponent``."""
    return [1.0 - 2.0 ** (-k) for k in range(1, cap_exponent + 1)]


def feasibility_alpha_search(problem: EpisodeProblem, dual: DualState, grid=None,
                             exact_terminal: bool = True, probe_budget: int | None = None):
    """Smallest grid value for which dual ascent certifies a feasible point.

    Returns ``(alpha_bar, DualResult, probes)`` where ``probes`` lists the values tried.
    """
    grid = contraction_grid() if grid is None else list(grid)
    budget = replace(dual, max_iters=probe_budget or max(dual.max_iters, 20000))
    probes = []
    last_error = None
    for alpha in grid:
        probes.append(alpha)
        candidate = replace(problem, alpha_bar=alpha)
        try:
            result = dual_ascent(candidate, budget, exact_terminal)
        except DualAscentError as err:
            last_error = err
            continue
        return alpha, result, probes
    raise InfeasibleError(
        f"no contraction value in {probes} gave a feasible problem "
        f"(last G = {getattr(last_error, 'last_g', float('nan')):.4g})")


def solve_episode(problem: EpisodeProblem, dual: DualState, alpha_search: bool = False,
                  grid=None, exact_terminal: bool = True, best_effort: bool = False,
                  method: str = "ascent", rel_tol: float = 1e-3):
    """One constrained mirror-descent step; returns ``(Policy, OccupancyMeasure, DualDiagnostics)``.

    ``method`` is ``"ascent"`` (gradient steps on the multiplier) or ``"bisection"``.
    With ``best_effort`` an exhausted dual budget returns the last iterate instead of
    raising; the diagnostics then report ``g_final > epsilon``.
    """
    if method not in DUAL_METHODS:
        raise ConfigurationError(f"unknown dual method {method!r}")
    alpha = problem.alpha_bar
    if alpha_search:
        alpha, result, _ = feasibility_alpha_search(problem, dual, grid, exact_terminal)
    else:
        try:
            if method == "bisection":
                result = bisection_multiplier(problem, dual, exact_terminal, rel_tol)
            else:
                result = dual_ascent(problem, dual, exact_terminal)
        except DualAscentError as err:
            if not best_effort or err.last_result is None:
                raise
            result = err.last_result
    diag = DualDiagnostics(result.lam, result.iterations, result.g, alpha, result.lambda_trace)
    return result.policy, result.occupancy, diag


DUAL_METHODS = {"ascent": dual_ascent, "bisection": bisection_multiplier}
