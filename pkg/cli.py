#!/usr/bin/env python3
"""
Command-line interface for the cache-enabled multicast latency simulator.

Solves single instances, runs Monte-Carlo sweeps and records convergence
traces of the FCBT, PCBT, PCPT, TSWC and JCEO transmission schemes.
"""

import sys
import json
import math
import logging
import argparse
from pathlib import Path
from typing import List, Optional

from errors import CacheLatencyError, ConfigError
from experiments import run_convergence, run_sweep, write_convergence_csv, write_solution_trace_csv
from file_utils import ensure_output_dir, prepare_output
from network_model import build_instance, summarize_instance
from run_config import (PRESETS, RunConfig, load_run_config, parse_grid, parse_schemes, parse_seeds,
                        resolve_threads)
from transmission_schemes import solve_scheme

logging.basicConfig(
    level=logging.WARNING,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    stream=sys.stderr,
)

PROJECT_LOGGERS = (
    "network_model",
    "subproblem_ir",
    "barrier_solver",
    "transmission_schemes",
    "experiments",
    "run_config",
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_INTERRUPTED = 130


def _error(message: str) -> None:
    print(message, file=sys.stderr)


def _set_log_level(args: argparse.Namespace) -> None:
    level = None
    if args.debug:
        level = logging.DEBUG
    elif args.verbose:
        level = logging.INFO
    if level is not None:
        for name in PROJECT_LOGGERS:
            logging.getLogger(name).setLevel(level)


def _progress_enabled(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _finite(value):
    """Replace non-finite floats so the JSON stays standard."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    return value


def _exit_code(status: str) -> int:
    if status == "converged":
        return EXIT_OK
    if status in ("max-iterations", "solver-failure"):
        return EXIT_NOT_CONVERGED
    return EXIT_ERROR


def _output(path: Path, args: argparse.Namespace) -> Path:
    path, backup_path = prepare_output(path, backup=not args.no_backup)
    if backup_path:
        print(f"✓ Backup created: {backup_path}")
    return path


def cmd_solve(args: argparse.Namespace, config: RunConfig) -> int:
    """Solve one instance with one scheme and write solution.json plus trace.csv."""
    scheme = args.scheme or config.run.scheme
    seed = config.run.seed if args.seed is None else args.seed
    out_dir = ensure_output_dir(args.out or config.run.out_dir)

    instance = build_instance(config.network, seed)
    if args.verbose:
        print(f"ℹ Instance (seed {seed}): {summarize_instance(instance)}")
    solution = solve_scheme(scheme, instance, config.outer_loop, config.solver)

    document = {
        "seed": seed,
        "config": config.source,
        "preset": config.preset,
        "instance": summarize_instance(instance),
        "solution": solution.to_dict(),
    }
    solution_path = _output(out_dir / "solution.json", args)
    solution_path.write_text(json.dumps(_finite(document), indent=2) + "\n", encoding="utf-8")
    trace_path = write_solution_trace_csv(solution, _output(out_dir / "trace.csv", args))

    mark = "✓" if solution.status == "converged" else "⚠"
    print(f"{mark} {scheme.upper()} seed {seed}: latency {solution.latency:.6g} s "
          f"(tau {solution.tau:.6g} s, status {solution.status})")
    for flag in solution.flags:
        print(f"⚠ {flag}")
    if solution.message:
        print(f"ℹ {solution.message}")
    print(f"✓ Solution saved to: {solution_path}")
    print(f"✓ Trace saved to: {trace_path}")
    return _exit_code(solution.status)


def cmd_sweep(args: argparse.Namespace, config: RunConfig) -> int:
    """Run a parameter sweep and write sweep.csv plus summary.csv."""
    grid = parse_grid(args.grid) if args.grid is not None else None
    schemes = parse_schemes(args.schemes) if args.schemes else None
    spec = config.sweep_spec(param=args.param, grid=grid, trials=args.trials,
                             base_seed=args.base_seed, schemes=schemes)
    threads = resolve_threads(args.threads, config)
    out_dir = ensure_output_dir(args.out_dir or config.run.out_dir)

    print(f"Sweeping {spec.param} over {list(spec.grid)} with {spec.trials} trial(s) "
          f"for {', '.join(spec.schemes)} on {threads} worker(s)...")
    result = run_sweep(spec, threads=threads, progress=_progress_enabled(args))

    sweep_path = result.to_csv(_output(out_dir / "sweep.csv", args))
    summary_path = result.summary_csv(_output(out_dir / "summary.csv", args))
    summary = result.summary()
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.6g}"))
    print(f"✓ {len(result.frame)} rows saved to: {sweep_path}")
    print(f"✓ Summary saved to: {summary_path}")
    failures = int(summary["failures"].sum())
    if failures:
        print(f"⚠ {failures} scheme run(s) did not converge")

    if result.all_failed():
        _error("✗ Every trial failed")
        return EXIT_ERROR
    return EXIT_OK


def cmd_convergence(args: argparse.Namespace, config: RunConfig) -> int:
    """Record per-iteration traces of one scheme over several seeds."""
    scheme = args.scheme or config.run.scheme
    seeds = parse_seeds(args.seeds) if args.seeds else list(config.run.seeds)
    threads = resolve_threads(args.threads, config)
    out_path = Path(args.out) if args.out else Path(config.run.out_dir) / f"convergence_{scheme}.csv"

    frame = run_convergence(config.network, scheme, seeds, config.outer_loop, config.solver,
                            threads=threads, progress=_progress_enabled(args))
    path = write_convergence_csv(frame, _output(out_path, args))

    counts = frame["seed"].value_counts()
    for seed in seeds:
        count = int(counts.get(seed, 0))
        mark = "✓" if count else "✗"
        print(f"{mark} {scheme.upper()} seed {seed}: {count} iteration(s)")
    print(f"✓ Trace saved to: {path}")
    return EXIT_OK if len(frame) else EXIT_ERROR


COMMANDS = {
    "solve": cmd_solve,
    "sweep": cmd_sweep,
    "convergence": cmd_convergence,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Path to a JSON run configuration (default: default_config.json)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="Apply a named parameter preset")
    common.add_argument("--threads", type=int, help="Worker processes (overrides CMLL_THREADS and run.threads)")
    common.add_argument("--no-backup", action="store_true", help="Overwrite existing outputs without a backup")
    common.add_argument("-v", "--verbose", action="store_true", help="Display progress information")
    common.add_argument("--debug", action="store_true", help="Display solver-level detail")
    common.add_argument("--quiet", action="store_true", help="Hide progress bars")

    parser = argparse.ArgumentParser(
        description="Minimize file delivery latency in cache-enabled multigroup multicast radio access networks",
        epilog="""
Examples:
  python cli.py solve --scheme pcpt --seed 3           # Solve one instance
  python cli.py solve --config my.json --out results   # Use a custom configuration
  python cli.py sweep --preset fig4 --trials 20        # Latency versus caching proportion
  python cli.py sweep --param C --grid 1,1.5,2,3       # Latency versus fronthaul capacity
  python cli.py convergence --preset fig3 --seeds 0-2  # PCPT convergence traces
        """,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", parents=[common], help="Solve one instance with one scheme")
    solve.add_argument("--scheme", help="fcbt, pcbt, pcpt, tswc or jceo")
    solve.add_argument("--seed", type=int, help="Instance seed")
    solve.add_argument("--out", help="Output directory")

    sweep = sub.add_parser("sweep", parents=[common], help="Monte-Carlo sweep over one parameter")
    sweep.add_argument("--param", help="xi, C, S or P_dB")
    sweep.add_argument("--grid", help="Comma-separated grid values")
    sweep.add_argument("--trials", type=int, help="Trials per grid value")
    sweep.add_argument("--base-seed", type=int, help="Seed of trial 0")
    sweep.add_argument("--schemes", help="Comma-separated scheme tags")
    sweep.add_argument("--out-dir", help="Output directory")

    convergence = sub.add_parser("convergence", parents=[common], help="Per-iteration convergence traces")
    convergence.add_argument("--scheme", help="fcbt, pcbt, pcpt, tswc or jceo")
    convergence.add_argument("--seeds", help="Seeds as 0,1,2 or 0-4")
    convergence.add_argument("--out", help="Output CSV path")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the CLI."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        _set_log_level(args)
        config = load_run_config(args.config, preset=args.preset)
        if args.verbose:
            print(f"✓ Loaded configuration from {config.source}"
                  + (f" with preset {config.preset}" if config.preset else ""))
        return COMMANDS[args.command](args, config)

    except KeyboardInterrupt:
        _error("\n⚠️ Interrupted")
        return EXIT_INTERRUPTED
    except ConfigError as e:
        where = f" (line {e.line})" if e.line is not None else ""
        _error(f"✗ Config error{where}: {e.args[0]}")
        return EXIT_ERROR
    except CacheLatencyError as e:
        _error(f"✗ Error: {e}")
        return EXIT_ERROR
    except Exception as e:
        _error(f"✗ Unexpected error: {e}")
        if args.verbose or args.debug:
            import traceback
            traceback.print_exc()
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
