"""Online protocols (known / unknown start distribution, episodic baseline), periodic regret
and the offline optimal-periodic-policy comparator."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, ConvergenceError, PeriodicMDPError, SolverAbort
from .estimation import (DEFAULT_DELTA, BonusSchedule, VisitCounters, bonus_schedule, empirical_kernel,
                         propagate_rho_tilde)
from .mdp import (Distribution, OccupancyMeasure, Policy, SpaceDims, Trajectory, forward_rollout,
                  sample_start, sample_trajectory)
from .solver import (BregmanKind, DualState, EpisodeProblem, backward_q_and_policy, constraint_value,
                     solve_episode)

AUTO = "auto"


class Framework(enum.Enum):
    KNOWN_RHO = "k"
    UNKNOWN_RHO = "u"
    EPISODIC_BASELINE = "baseline"


@dataclass(frozen=True)
class ProtocolConfig:
    """Protocol settings.

    ``bonus_scale`` multiplies the high-probability confidence constant.
    ``lambda_warm_start`` starts each episode's dual ascent from the previous
    multiplier instead of ``dual.lam``. ``alpha_reference`` picks the start
    distribution in the contraction slack: ``"previous"`` uses the start of the
    episode just played, ``"current"`` the start of the episode being planned.
    ``gap_offset = 1`` charges episode ``t`` with ``||rho_{t+1} - rho||_1``
    instead of ``||rho_t - rho||_1``. ``dual_units = "md"`` reads ``dual.eta_lambda``
    as a step on ``eta * lambda`` (the multiplier of the problem scaled by ``eta``),
    so the step on ``lambda`` itself is ``eta_lambda / eta``. ``dual_method =
    "bisection"`` replaces the multiplier gradient steps by a bisection search for
    the smallest multiplier meeting the constraint. ``pool_steps`` shares counts
    across steps for the kernel estimates and bonuses, which is valid when the true
    kernel does not depend on the step.
    """

    num_episodes: int = 1000
    num_agents: int = 2
    framework: Framework = Framework.KNOWN_RHO
    eta: float = 0.01
    dual: DualState = field(default_factory=lambda: DualState(eta_lambda=0.01))
    alpha_bar: object = 0.1
    delta: float = DEFAULT_DELTA
    gamma: float = 1000.0
    seed: int = 0
    mix_rate: float = 1e-6
    bonus_scale: float = 1.0
    bregman: BregmanKind = BregmanKind.POLICY_GAMMA
    finite_agents: bool = False
    lambda_warm_start: bool = True
    alpha_reference: str = "previous"
    gap_offset: int = 0
    dual_units: str = "loss"
    on_infeasible: str = "abort"
    dual_method: str = "ascent"
    pool_steps: bool = False

    def __post_init__(self):
        if int(self.num_episodes) != self.num_episodes or self.num_episodes < 1:
            raise ConfigurationError("num_episodes must be a positive integer")
        if not isinstance(self.framework, Framework):
            object.__setattr__(self, "framework", Framework(self.framework))
        if self.framework is not Framework.EPISODIC_BASELINE and self.num_agents < 2:
            raise ConfigurationError("the periodic protocols need at least two agents")
        if self.num_agents < 1:
            raise ConfigurationError("num_agents must be positive")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if self.alpha_bar != AUTO and not 0.0 <= float(self.alpha_bar) < 1.0:
            raise ConfigurationError(f"alpha_bar must lie in [0, 1) or be {AUTO!r}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.gamma < 0 or self.mix_rate < 0 or self.bonus_scale < 0:
            raise ConfigurationError("gamma, mix_rate and bonus_scale must be non-negative")
        if self.alpha_reference not in ("previous", "current"):
            raise ConfigurationError("alpha_reference must be 'previous' or 'current'")
        if self.on_infeasible not in ("abort", "best_effort"):
            raise ConfigurationError("on_infeasible must be 'abort' or 'best_effort'")
        if self.dual_units not in ("loss", "md"):
            raise ConfigurationError("dual_units must be 'loss' or 'md'")
        if self.dual_method not in ("ascent", "bisection"):
            raise ConfigurationError("dual_method must be 'ascent' or 'bisection'")
        if self.gap_offset not in (0, 1):
            raise ConfigurationError("gap_offset must be 0 or 1")
        if not isinstance(self.bregman, BregmanKind):
            object.__setattr__(self, "bregman", BregmanKind(self.bregman))


@dataclass(frozen=True)
class EpisodeRecord:
    """One episode. Solver diagnostics refer to the step computing the next policy."""

    t: int
    loss: float
    comparator_loss: float
    rho_gap: float
    rho_tilde_gap: float
    lambda_final: float
    dual_iters: int
    g_final: float
    alpha_bar: float

    def __post_init__(self):
        if not np.isfinite(self.loss):
            raise PeriodicMDPError(f"episode {self.t}: non-finite loss")
        if not -1e-12 <= self.rho_gap <= 2.0 + 1e-12:
            raise PeriodicMDPError(f"episode {self.t}: rho gap {self.rho_gap} outside [0, 2]")


@dataclass
class RegretLedger:
    gamma: float
    records: list = field(default_factory=list)
    regret_cum: list = field(default_factory=list)

    def append(self, record: EpisodeRecord):
        previous = self.regret_cum[-1] if self.regret_cum else 0.0
        step = record.loss - record.comparator_loss + self.gamma * record.rho_gap
        self.records.append(record)
        self.regret_cum.append(previous + step)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    def recomputation_error(self) -> float:
        if not self.records:
            return 0.0
        return float(np.max(np.abs(periodic_regret(self, self.gamma) - np.array(self.regret_cum))))


def periodic_regret(ledger: RegretLedger, gamma: float) -> np.ndarray:
    """``R_t = sum_{s<=t} (loss_s - comparator_s) + gamma * sum_{s<=t} rho_gap_s``."""
    loss = ledger.column("loss")
    comp = ledger.column("comparator_loss")
    if np.any(np.isnan(comp)):
        raise ConfigurationError("comparator losses missing from the ledger")
    return np.cumsum(loss - comp) + gamma * np.cumsum(ledger.column("rho_gap"))


def loglog_slope(regret, fraction: float = 0.5) -> float:
    """Least-squares slope of ``log R_t`` against ``log t`` over the last ``fraction`` of episodes."""
    regret = np.asarray(regret, dtype=np.float64)
    t = np.arange(1, regret.size + 1, dtype=np.float64)
    start = int(np.floor(regret.size * (1.0 - fraction)))
    t, regret = t[start:], regret[start:]
    if regret.size < 2 or np.any(regret <= 0):
        return float("nan")
    return float(np.polyfit(np.log(t), np.log(regret), 1)[0])


# ---------------------------------------------------------------------------
# Offline comparator


@dataclass(frozen=True, eq=False)
class ComparatorResult:
    policy: Policy
    occupancy: OccupancyMeasure
    iterations: int
    periodicity_defect: float


def _average_gradient(objectives, slices):
    grads = [obj.gradient(slices) for obj in objectives]
    return np.mean(grads, axis=0)


def offline_optimal_periodic(env, objective, tol: float = 1e-3, eta: float = 0.5, max_iters: int = 3000,
                             dual: DualState | None = None, mix_rate: float = 1e-9,
                             homotopy: float = 0.9) -> ComparatorResult:
    """Best periodic policy for the averaged objective under the true kernel.

    Iterates the constrained mirror-descent step from ``rho`` with zero bonuses and
    no contraction slack until successive occupancies differ by less than ``tol`` in
    ``||.||_{inf,1}`` and ``||mu_N - rho||_1 < tol``. ``objective`` is a single
    objective or a sequence of per-episode objectives.

    The multiplier of each step is found by bisection. The constraint level starts
    at 1 and shrinks by ``homotopy`` per iteration down to ``tol / 2``; enforcing the
    tight level from a uniform start collapses the policy onto the start cell.
    ``eta`` is halved whenever the iterates jump by more than 0.5 once the final level
    is reached.
    """
    objectives = list(objective) if isinstance(objective, (list, tuple)) else [objective]
    dims = env.dims
    kernel, rho = env.kernel, env.rho
    if dims.num_actions == 1:
        policy = Policy(np.ones((dims.horizon, dims.num_states, 1)))
        occ = forward_rollout(policy, rho, kernel)
        return ComparatorResult(policy, occ, 0, occ.terminal_distribution().l1(rho))
    dual = dual or DualState(epsilon=tol / 2, max_iters=400)
    zero = BonusSchedule.zeros(dims)
    policy = Policy.uniform(dims)
    occ = forward_rollout(policy, rho, kernel)
    lam, level = max(dual.lam, 1.0), 1.0
    for it in range(1, max_iters + 1):
        level = max(dual.epsilon, level * homotopy)
        problem = EpisodeProblem(_average_gradient(objectives, occ.slices), zero,
                                 policy.mixed_with_uniform(mix_rate), kernel, rho, rho, eta, 0.0)
        policy, new_occ, diag = solve_episode(problem, replace(dual, lam=max(lam, 1.0), epsilon=level),
                                              method="bisection", rel_tol=1e-7)
        lam = diag.lambda_final
        step = new_occ.distance(occ)
        occ = new_occ
        defect = occ.terminal_distribution().l1(rho)
        if level > dual.epsilon:
            continue
        if step > 0.5:
            eta *= 0.5
        elif step < tol and defect < tol:
            return ComparatorResult(policy, occ, it, defect)
    raise ConvergenceError(
        f"offline comparator did not converge within {max_iters} iterations (last step {step:.3g}, "
        f"defect {defect:.3g}); raise max_iters or relax tol")


# ---------------------------------------------------------------------------
# Simulation


class _Streams:
    """Independent generators split from the master seed, one per purpose."""

    NAMES = ("observe", "restart", "agents", "pick")

    def __init__(self, seed):
        children = np.random.SeedSequence(int(seed)).spawn(len(self.NAMES))
        for name, child in zip(self.NAMES, children):
            setattr(self, name, np.random.default_rng(child))

    def state(self):
        return {name: getattr(self, name).bit_generator.state for name in self.NAMES}


class _FiniteAgents:
    """Explicit population of ``M`` agents carried across episodes without resets."""

    def __init__(self, rho: Distribution, count: int, rng):
        self.rng = rng
        self.positions = [sample_start(rho, rng) for _ in range(count)]

    def play(self, policy, kernel):
        trajs = [sample_trajectory(policy, kernel, pos, self.rng) for pos in self.positions]
        self.positions = [(int(tr.states[-1]), int(tr.actions[-1])) for tr in trajs]
        return trajs


@dataclass
class ProtocolState:
    """Everything needed to inspect (or checkpoint) the run after an episode."""

    episode: int
    counters: VisitCounters
    lam: float
    policy: Policy
    rho_t: Distribution
    rho_tilde: Distribution | None
    true_occupancy: OccupancyMeasure
    streams: _Streams


def _comparator_losses(env, objective, comparator, num_episodes):
    if comparator is None:
        comparator = offline_optimal_periodic(env, objective)
    occ = comparator.occupancy if isinstance(comparator, ComparatorResult) else comparator
    slices = occ.slices if isinstance(occ, OccupancyMeasure) else np.asarray(occ)
    return [objective.at(t).value(slices) for t in range(1, num_episodes + 1)]


def run_protocol(env, objective, config: ProtocolConfig, comparator=None, callback=None,
                 initial_policy: Policy | None = None, kernel_override=None,
                 tilde_kernel_override=None, zero_bonuses: bool = False) -> RegretLedger:
    """Run ``config.num_episodes`` episodes of the selected framework.

    ``comparator`` is a ``ComparatorResult`` (or comparator occupancy); when omitted it
    is computed with ``offline_optimal_periodic``. ``callback(state)`` runs after
    every episode. The override arguments replace the estimated kernels by given
    ones and ``zero_bonuses`` disables both bonuses; they exist for diagnostics.
    """
    dims: SpaceDims = env.dims
    true_kernel, rho = env.kernel, env.rho
    framework = config.framework
    comp_losses = _comparator_losses(env, objective, comparator, config.num_episodes)
    streams = _Streams(config.seed)
    counters = VisitCounters(dims)
    tilde_counters = VisitCounters(dims)
    policy = initial_policy or Policy.uniform(dims)
    rho_t = rho
    rho_tilde = rho if framework is Framework.UNKNOWN_RHO else None
    agents = _FiniteAgents(rho, config.num_agents, streams.agents) if config.finite_agents else None
    restart_pos = None
    if rho_tilde is not None:
        restart_pos = agents.positions[-1] if agents is not None else sample_start(rho, streams.restart)
    estimate = empirical_kernel(counters) if kernel_override is None else kernel_override
    plan_init = rho
    mu_plan = forward_rollout(policy, plan_init, estimate)
    lam = config.dual.lam
    ledger = RegretLedger(config.gamma)

    for t in range(1, config.num_episodes + 1):
        obj_t = objective.at(t)
        true_occ = forward_rollout(policy, rho_t, true_kernel)
        rho_next = Distribution.renormalized(true_occ.slices[-1])

        # Observed trajectory for the kernel estimate.
        trajs = None
        if agents is not None:
            trajs = agents.play(policy, true_kernel)
            observed = trajs[int(streams.pick.integers(len(trajs)))]
        else:
            start = sample_start(rho_t, streams.observe)
            observed = sample_trajectory(policy, true_kernel, start, streams.observe)
        counters.update(observed)
        estimate = empirical_kernel(counters, pooled=config.pool_steps) if kernel_override is None else kernel_override

        rho_tilde_gap = float("nan")
        rho_tilde_next = None
        if rho_tilde is not None:
            rho_tilde_gap = rho_tilde.l1(rho_t)
            if trajs is not None:
                restart_traj = trajs[-1]
            else:
                restart_traj = sample_trajectory(policy, true_kernel, restart_pos, streams.restart)
            tilde_counters.update(restart_traj)
            tilde_kernel = tilde_kernel_override or empirical_kernel(tilde_counters, pooled=config.pool_steps)
            rho_tilde_next = propagate_rho_tilde(rho_tilde, policy, tilde_kernel)
            restart_pos = sample_start(rho_tilde_next, streams.restart)
            if agents is not None:
                agents.positions[-1] = restart_pos

        gradient = obj_t.gradient(mu_plan.slices)
        if zero_bonuses:
            bonuses = BonusSchedule.zeros(dims)
        else:
            bonuses = bonus_schedule(counters, dims, config.delta, obj_t.lipschitz,
                                     config.num_episodes, config.bonus_scale, config.pool_steps)
        prior = policy.mixed_with_uniform(config.mix_rate)

        try:
            if framework is Framework.EPISODIC_BASELINE:
                no_slack = BonusSchedule(np.zeros_like(bonuses.slack), bonuses.gradient, bonuses.c_delta,
                                         bonuses.lipschitz, bonuses.delta)
                problem = EpisodeProblem(gradient, no_slack, prior, estimate, rho, rho, config.eta, 0.0,
                                         config.bregman)
                _, new_policy, new_mu = backward_q_and_policy(problem, config.gamma)
                g = constraint_value(new_mu, rho, no_slack, 0.0, rho)
                lam_out, iters, alpha_used = config.gamma, 0, 0.0
            else:
                if framework is Framework.KNOWN_RHO:
                    plan_next, plan_prev = rho_next, rho_t
                else:
                    plan_next, plan_prev = rho_tilde_next, rho_tilde
                ref = plan_prev if config.alpha_reference == "previous" else plan_next
                auto = config.alpha_bar == AUTO
                alpha = 0.0 if auto else float(config.alpha_bar)
                problem = EpisodeProblem(gradient, bonuses, prior, estimate, plan_next, rho, config.eta, alpha,
                                         config.bregman, ref_init=ref)
                new_policy, new_mu, diag = solve_episode(problem, _episode_dual(config, lam), alpha_search=auto,
                                                         best_effort=config.on_infeasible == "best_effort",
                                                         method=config.dual_method)
                lam = diag.lambda_final
                lam_out, iters, g, alpha_used = diag.lambda_final, diag.dual_iters, diag.g_final, diag.alpha_bar
        except PeriodicMDPError as err:
            raise SolverAbort(f"solver failed at episode {t}: {err}", episode=t,
                              diagnostics={"lambda": lam, "rho_gap": rho_t.l1(rho)}) from err

        gap = rho_t.l1(rho) if config.gap_offset == 0 else rho_next.l1(rho)
        ledger.append(EpisodeRecord(t, obj_t.value(true_occ.slices), comp_losses[t - 1], gap, rho_tilde_gap,
                                    float(lam_out), int(iters), float(g), float(alpha_used)))

        policy, mu_plan, rho_t = new_policy, new_mu, rho_next
        if rho_tilde is not None:
            rho_tilde = rho_tilde_next
        if callback is not None:
            callback(ProtocolState(t, counters, lam, policy, rho_t, rho_tilde, true_occ, streams))
    return ledger


def _episode_dual(config: ProtocolConfig, lam: float) -> DualState:
    start = lam if config.lambda_warm_start else config.dual.lam
    step = config.dual.eta_lambda
    if config.dual_units == "md":
        step = step / config.eta
    return replace(config.dual, lam=start, eta_lambda=step)


def _require(config, framework):
    if config.framework is not framework:
        raise ConfigurationError(f"expected framework {framework.name}, got {config.framework.name}")


def run_mdpp_k(env, objective, config: ProtocolConfig, **kwargs) -> RegretLedger:
    _require(config, Framework.KNOWN_RHO)
    return run_protocol(env, objective, config, **kwargs)


def run_mdpp_u(env, objective, config: ProtocolConfig, **kwargs) -> RegretLedger:
    _require(config, Framework.UNKNOWN_RHO)
    return run_protocol(env, objective, config, **kwargs)


def run_episodic_baseline(env, objective, config: ProtocolConfig, **kwargs) -> RegretLedger:
    _require(config, Framework.EPISODIC_BASELINE)
    return run_protocol(env, objective, config, **kwargs)
