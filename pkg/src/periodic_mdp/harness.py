"""Experiment driver: environments from configs, ledgers, checkpoints and sweeps."""
from __future__ import annotations

import csv
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import plots
from .algorithms import RegretLedger, loglog_slope, offline_optimal_periodic, run_protocol
from .config import RunConfig
from .environments import build_environment, load_map, preset
from .errors import ConfigurationError

LEDGER_COLUMNS = ("episode", "loss", "comparator_loss", "regret_cum", "rho_gap_l1", "rho_tilde_gap_l1",
                  "lambda_final", "dual_iters", "g_final", "alpha_bar")
SUMMARY_COLUMNS = ("run", "status", "final_regret", "slope", "last_decile_rho_gap", "error")
THREADS_ENV = "PERIODIC_MDP_THREADS"
SWEEP_ALIASES = {"seed": "protocol.seed", "T": "protocol.num_episodes", "eta": "protocol.eta",
                 "gamma": "protocol.gamma", "noise": "env.noise"}


class SchemaError(ValueError):
    """A ledger file whose columns differ from ``LEDGER_COLUMNS``."""


def build_env(cfg: RunConfig):
    horizon = cfg["env.horizon"] or None
    if cfg["env.map"]:
        grid = load_map(cfg["env.map"], cfg["env.noise"])
        if horizon is None:
            raise ConfigurationError("a map file needs env.horizon")
        return build_environment(grid, horizon, cfg["env.objective"], Path(cfg["env.map"]).stem, cfg["env.floor"])
    return preset(cfg["env.preset"], cfg["env.noise"], horizon, cfg["env.floor"])


@lru_cache(maxsize=16)
def _comparator(env_key, tol, eta, max_iters):
    cfg = RunConfig(dict(env_key))
    env = build_env(cfg)
    return offline_optimal_periodic(env, env.objective, tol=tol, eta=eta, max_iters=max_iters)


def comparator_for(cfg: RunConfig):
    """Offline comparator for the run's environment, cached per process."""
    env_key = tuple((k, cfg[k]) for k in ("env.preset", "env.map", "env.objective", "env.horizon",
                                            "env.noise", "env.floor"))
    return _comparator(env_key, cfg["comparator.tol"], cfg["comparator.eta"], cfg["comparator.max_iters"])


# ---------------------------------------------------------------------------
# Ledger files


def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    return "nan" if math.isnan(value) else repr(value)


def ledger_rows(ledger: RegretLedger):
    for record, regret in zip(ledger.records, ledger.regret_cum):
        yield (record.t, record.loss, record.comparator_loss, regret, record.rho_gap, record.rho_tilde_gap,
               record.lambda_final, record.dual_iters, record.g_final, record.alpha_bar)


def write_ledger(path, ledger: RegretLedger):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(LEDGER_COLUMNS)
        for row in ledger_rows(ledger):
            writer.writerow([_fmt(v) for v in row])


def read_ledger(path) -> dict:
    """Columns of a ledger file as float arrays; raises ``SchemaError`` on a bad header."""
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise SchemaError(f"{path}: empty file")
        for i, name in enumerate(LEDGER_COLUMNS):
            if i >= len(header) or header[i] != name:
                found = header[i] if i < len(header) else "<missing>"
                raise SchemaError(f"{path}: column {i + 1} should be {name!r}, found {found!r}")
        if len(header) > len(LEDGER_COLUMNS):
            raise SchemaError(f"{path}: unexpected column {header[len(LEDGER_COLUMNS)]!r}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(LEDGER_COLUMNS))
    return {name: data[:, i] for i, name in enumerate(LEDGER_COLUMNS)}


def last_decile_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    start = int(np.floor(0.9 * values.size))
    return float(values[start:].mean())


# ---------------------------------------------------------------------------
# Runs


@dataclass
class RunResult:
    ledger: RegretLedger
    out_dir: Path | None
    final_regret: float
    slope: float
    last_decile_gap: float


def _checkpoint_writer(out_dir: Path, every: int):
    def callback(state):
        if every <= 0 or state.episode % every:
            return
        rho_tilde = state.rho_tilde.mass if state.rho_tilde is not None else np.full(state.rho_t.mass.shape, np.nan)
        np.savez_compressed(
            out_dir / f"checkpoint_{state.episode:06d}.npz",
            episode=state.episode,
            pair_counts=state.counters.pair_counts,
            triple_counts=state.counters.triple_counts,
            lam=state.lam,
            policy=state.policy.action_probs,
            rho_t=state.rho_t.mass,
            rho_tilde=rho_tilde,
            occupancy=state.true_occupancy.slices,
            rng_state=json.dumps(state.streams.state(), sort_keys=True),
        )
    return callback


def run_experiment(cfg: RunConfig, out_dir=None, write: bool = True) -> RunResult:
    """Run one configuration; with ``write`` the artifacts go to ``out_dir`` (default ``output.dir``)."""
    env = build_env(cfg)
    protocol = cfg.protocol()
    comparator = comparator_for(cfg)
    callback = None
    path = None
    if write:
        path = Path(out_dir or cfg["output.dir"])
        path.mkdir(parents=True, exist_ok=True)
        cfg = cfg.with_values({"output.dir": str(path)})
        (path / "config.resolved").write_text(cfg.dumps())
        callback = _checkpoint_writer(path, cfg["output.checkpoint_every"])
    ledger = run_protocol(env, env.objective, protocol, comparator=comparator, callback=callback)
    regret = np.array(ledger.regret_cum)
    result = RunResult(ledger, path, float(regret[-1]), loglog_slope(regret),
                       last_decile_mean(ledger.column("rho_gap")))
    if write:
        write_ledger(path / "ledger.csv", ledger)
        if cfg["output.plots"]:
            plots.regret_chart([(protocol.framework.value, range(1, len(regret) + 1), regret)],
                               path / "regret.svg")
            snapshot = latest_checkpoint(path)
            if snapshot is not None:
                with np.load(snapshot) as data:
                    plots.occupancy_heatmaps(env.grid, data["occupancy"], path / "heatmap.svg",
                                             title=f"State distribution, episode {int(data['episode'])}")
    return result


def latest_checkpoint(directory):
    found = sorted(Path(directory).glob("checkpoint_*.npz"))
    return found[-1] if found else None


# ---------------------------------------------------------------------------
# Sweeps


def parse_grid(items) -> dict:
    """``["seed=0,1", "T=100,200"]`` to ``{"protocol.seed": ["0", "1"], ...}``."""
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigurationError(f"grid entry {item!r} is not key=v1,v2,...")
        key, values = item.split("=", 1)
        key = SWEEP_ALIASES.get(key.strip(), key.strip())
        options = [v.strip() for v in values.split(",") if v.strip()]
        if not options:
            raise ConfigurationError(f"grid entry {item!r} has no values")
        grid[key] = options
    return grid


def sweep_configs(base: RunConfig, grid: dict):
    """Product of the grid as override dicts; runs without an explicit seed get one derived from the base seed."""
    keys = list(grid)
    for index, combo in enumerate(itertools.product(*(grid[k] for k in keys))):
        values = dict(zip(keys, combo))
        if "protocol.seed" not in values:
            seq = np.random.SeedSequence([base["protocol.seed"], index])
            values["protocol.seed"] = str(int(seq.generate_state(1, dtype=np.uint32)[0]))
        yield index, values


def _sweep_worker(args):
    index, values, base, out_dir = args
    run_dir = Path(out_dir) / f"run_{index:03d}"
    try:
        cfg = RunConfig({**base.values, **values})
        result = run_experiment(cfg, run_dir)
        row = {"status": "ok", "final_regret": result.final_regret, "slope": result.slope,
               "last_decile_rho_gap": result.last_decile_gap, "error": ""}
    except Exception as err:  # one failed run must not stop the sweep
        row = {"status": "failed", "final_regret": float("nan"), "slope": float("nan"),
               "last_decile_rho_gap": float("nan"), "error": f"{type(err).__name__}: {err}"}
    row["run"] = run_dir.name
    row.update(values)
    return index, row


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, min(count, os.cpu_count() or 1))


def run_sweep(base: RunConfig, grid: dict, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(i, values, base, out_dir) for i, values in sweep_configs(base, grid)]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, jobs))
    else:
        rows = [_sweep_worker(job) for job in jobs]
    rows.sort(key=lambda pair: pair[0])
    columns = list(SUMMARY_COLUMNS) + sorted({k for _, row in rows for k in row} - set(SUMMARY_COLUMNS))
    summary = out_dir / "summary.csv"
    with open(summary, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for _, row in rows:
            writer.writerow({k: _fmt(v) if isinstance(v, float) else v for k, v in row.items()})
    return summary
