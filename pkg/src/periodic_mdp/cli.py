"""Command line entry point: ``periodic-mdp {run,plot,sweep,oracle}``."""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import harness, oracles, plots
from .config import RunConfig, load
from .environments import PRESETS
from .errors import ConfigurationError, SolverAbort
from .mdp import SpaceDims, forward_rollout
from .solver import backward_q_and_policy, feasibility_alpha_search, lagrangian_value, DualState

EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _add_run_flags(parser):
    parser.add_argument("--config", help="run configuration file")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--framework", choices=("k", "u", "baseline"))
    parser.add_argument("--preset", choices=sorted(PRESETS))
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def build_parser():
    parser = argparse.ArgumentParser(prog="periodic-mdp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one configuration")
    _add_run_flags(run)
    plot = sub.add_parser("plot", help="chart one or more ledgers")
    plot.add_argument("ledgers", nargs="+")
    plot.add_argument("--labels", nargs="+")
    plot.add_argument("--out", default=".", help="directory for the chart files")
    plot.add_argument("--log", action="store_true", help="log-log axes")
    sweep = sub.add_parser("sweep", help="run a grid of configurations")
    _add_run_flags(sweep)
    sweep.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2",
                       help="grid axis; keys seed, T, eta, gamma, noise or any config key")
    oracle = sub.add_parser("oracle", help="print the brute-force oracle tables")
    oracle.add_argument("--instances", type=int, default=5)
    oracle.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(path)
        cfg = load(path)
    else:
        cfg = RunConfig()
    values = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not KEY=VALUE")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    flags = {"protocol.seed": args.seed, "protocol.num_episodes": args.episodes, "output.dir": args.out,
             "protocol.framework": args.framework, "env.preset": args.preset}
    values.update({k: str(v) for k, v in flags.items() if v is not None})
    return RunConfig({**cfg.values, **values})


def cmd_run(args):
    cfg = resolve_config(args)
    start = time.perf_counter()
    result = harness.run_experiment(cfg)
    print(f"wrote {result.out_dir / 'ledger.csv'} ({len(result.ledger.records)} episodes, "
          f"{time.perf_counter() - start:.1f} s)")
    print(f"final cumulative regret: {result.final_regret:.6g}")
    print(f"mean last-decile rho_gap: {result.last_decile_gap:.6g}")
    return 0


def cmd_plot(args):
    labels = args.labels or [Path(p).parent.name or Path(p).stem for p in args.ledgers]
    if len(labels) != len(args.ledgers):
        raise ConfigurationError("--labels needs one label per ledger")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = []
    for label, path in zip(labels, args.ledgers):
        columns = harness.read_ledger(path)
        series.append((label, columns["episode"].astype(int), columns["regret_cum"]))
    chart = plots.regret_chart(series, out / "regret.svg", logscale=args.log)
    print(f"wrote {chart}")
    for label, path in zip(labels, args.ledgers):
        run_dir = Path(path).parent
        snapshot = harness.latest_checkpoint(run_dir)
        resolved = run_dir / "config.resolved"
        if snapshot is None or not resolved.is_file():
            continue
        env = harness.build_env(load(resolved))
        with np.load(snapshot) as data:
            heat = plots.occupancy_heatmaps(env.grid, data["occupancy"], out / f"heatmap_{label}.svg",
                                            title=f"{label}, episode {int(data['episode'])}")
        print(f"wrote {heat}")
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    grid = harness.parse_grid(args.grid)
    summary = harness.run_sweep(cfg, grid, cfg["output.dir"])
    print(f"wrote {summary}")
    return 0


def oracle_tables(instances: int = 5, seed: int = 0) -> str:
    rng = np.random.default_rng(seed)
    lines = ["DP policy vs exhaustive policy grid (2 states, 2 actions, N = 2, step 0.02)",
             f"{'instance':>8} {'lambda':>8} {'DP value':>14} {'grid min':>14} {'DP - grid':>11}"]
    dims = SpaceDims(2, 2, 2)
    for i in range(instances):
        problem = oracles.random_problem(rng, dims)
        lam = float(rng.uniform(0.0, 2.0))
        _, policy, mu = backward_q_and_policy(problem, lam)
        dp = lagrangian_value(problem, mu, lam, policy)
        grid = oracles.grid_lagrangian_minimum(problem, lam)
        lines.append(f"{i:>8} {lam:>8.4f} {dp:>14.8f} {grid.value:>14.8f} {dp - grid.value:>11.2e}")
    lines += ["", "Occupancy by trajectory enumeration vs forward rollout",
              f"{'instance':>8} {'X':>3} {'A':>3} {'N':>3} {'max abs diff':>13}"]
    for i in range(instances):
        dims = SpaceDims(int(rng.integers(2, 4)), 2, int(rng.integers(1, 4)))
        policy = oracles.random_policy(rng, dims)
        kernel = oracles.random_kernel(rng, dims)
        init = oracles.random_distribution(rng, dims.num_states, dims.num_actions)
        exact = oracles.occupancy_by_enumeration(policy, kernel, init)
        diff = float(np.abs(exact - forward_rollout(policy, init, kernel).slices).max())
        lines.append(f"{i:>8} {dims.num_states:>3} {dims.num_actions:>3} {dims.horizon:>3} {diff:>13.2e}")
    problem = oracles.contraction_instance()
    alpha, _, _ = feasibility_alpha_search(problem, DualState(eta_lambda=10.0, max_iters=20000))
    lines += ["", "Contraction search on the absorbing two-state instance",
              f"grid minimum terminal gap: {oracles.grid_min_terminal_gap(problem):.6f}",
              f"smallest feasible alpha_bar: {alpha:.6f}"]
    return "\n".join(lines)


def cmd_oracle(args):
    print(oracle_tables(args.instances, args.seed))
    return 0


COMMANDS = {"run": cmd_run, "plot": cmd_plot, "sweep": cmd_sweep, "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as err:
        print(f"error: file not found: {err.filename or err.args[0]}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, harness.SchemaError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverAbort as err:
        print(f"error: solver aborted at episode {err.episode}: {err}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
