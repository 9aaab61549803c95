#!/usr/bin/env python3
"""
experiments.py - Monte-Carlo sweeps and convergence traces.

Features:
- Paired-seed sweeps over the caching proportion, fronthaul capacity, file
  size or transmit power: trial t uses seed base_seed + t for every scheme and
  every grid point
- Work pool over (grid point, trial) tasks; one process gives a serial
  reference run
- Per-cell summaries (mean, standard error, failures) and listwise-deleted
  paired tables
- Convergence traces of the SCA / penalty loops
- CSV output with a fixed column order and number format

Dependencies:
    - numpy: pip install numpy
    - pandas: pip install pandas
    - tqdm: pip install tqdm
"""

import math
import logging
import multiprocessing
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from barrier_solver import SolverSettings
from errors import CacheLatencyError, ConfigError
from network_model import NetworkConfig, SCHEME_TAGS, SchemeSolution, build_instance, db_to_linear
from transmission_schemes import OuterLoopSettings, solve_scheme

logger = logging.getLogger(__name__)

SWEEP_PARAMS = ("xi", "C", "S", "P_dB")
SWEEP_COLUMNS = ["param_name", "param_value", "scheme", "trial", "seed", "latency_s", "tau_s", "status"]
SUMMARY_COLUMNS = ["param_name", "param_value", "scheme", "mean_latency_s", "stderr_s", "n", "failures"]
CONVERGENCE_COLUMNS = ["scheme", "seed", "outer_iter", "inner_iter", "objective", "approx_error", "lambda", "rho"]
# Schemes whose delay surrogate theta has an approximation error to report.
APPROX_ERROR_SCHEMES = ("pcbt", "pcpt")
SOLUTION_TRACE_COLUMNS = ["outer_iter", "inner_iter", "objective", "residual", "approx_error", "lambda", "rho"]
DEFAULT_SCHEMES = ("fcbt", "pcbt", "pcpt", "tswc")
CSV_OPTIONS = {"index": False, "float_format": "%.10g", "lineterminator": "\n", "na_rep": ""}


def config_at(config: NetworkConfig, param: str, value: float) -> NetworkConfig:
    """The network configuration at one grid point of a sweep."""
    if param == "xi":
        return config.with_overrides(xi=float(value))
    if param == "C":
        return config.with_overrides(C=float(value))
    if param == "S":
        return config.with_overrides(S=float(value))
    if param == "P_dB":
        return config.with_overrides(P=db_to_linear(float(value)))
    raise ConfigError(f"cannot sweep '{param}' (choose from {', '.join(SWEEP_PARAMS)})", key="param")


@dataclass(frozen=True)
class SweepSpec:
    """One swept parameter over a grid, with everything else fixed."""

    param: str
    grid: Tuple[float, ...]
    config: NetworkConfig
    trials: int = 20
    base_seed: int = 0
    schemes: Tuple[str, ...] = DEFAULT_SCHEMES
    outer: OuterLoopSettings = field(default_factory=OuterLoopSettings)
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if self.param not in SWEEP_PARAMS:
            raise ConfigError(f"cannot sweep '{self.param}' (choose from {', '.join(SWEEP_PARAMS)})", key="param")
        grid = tuple(float(v) for v in self.grid)
        if not grid:
            raise ConfigError("sweep grid is empty", key="grid")
        if list(grid) != sorted(grid):
            raise ConfigError("sweep grid must be sorted ascending", key="grid")
        object.__setattr__(self, "grid", grid)
        if self.trials < 1:
            raise ConfigError(f"trials must be >= 1, got {self.trials}", key="trials")
        if self.base_seed < 0:
            raise ConfigError("base_seed must be >= 0", key="base_seed")
        unknown = [s for s in self.schemes if s not in SCHEME_TAGS]
        if unknown or not self.schemes:
            raise ConfigError(f"unknown or missing schemes {unknown}", key="schemes")
        object.__setattr__(self, "schemes", tuple(self.schemes))
        for value in grid:
            config_at(self.config, self.param, value)

    @property
    def task_count(self) -> int:
        return len(self.grid) * self.trials


def _run_trial(task: Tuple[float, int], spec: SweepSpec) -> Tuple[List[Dict[str, object]], List[str]]:
    """All schemes on one (grid value, trial) pair; never raises for scheme failures."""
    value, trial = task
    seed = spec.base_seed + trial
    rows, errors = [], []

    def row(scheme, latency_s, tau_s, status):
        return {"param_name": spec.param, "param_value": value, "scheme": scheme, "trial": trial,
                "seed": seed, "latency_s": latency_s, "tau_s": tau_s, "status": status}

    try:
        instance = build_instance(config_at(spec.config, spec.param, value), seed)
    except CacheLatencyError as e:
        errors.append(f"{spec.param}={value} seed={seed}: {e}")
        return [row(s, math.nan, math.nan, "infeasible-input") for s in spec.schemes], errors

    for scheme in spec.schemes:
        try:
            solution = solve_scheme(scheme, instance, spec.outer, spec.solver)
            rows.append(row(scheme, solution.latency, solution.tau, solution.status))
            if solution.message:
                errors.append(f"{scheme} {spec.param}={value} seed={seed}: {solution.message}")
        except (CacheLatencyError, ArithmeticError, np.linalg.LinAlgError) as e:
            errors.append(f"{scheme} {spec.param}={value} seed={seed}: {e}")
            rows.append(row(scheme, math.nan, math.nan, "solver-failure"))
    return rows, errors


@dataclass
class SweepResult:
    """Per-trial table of a sweep plus its aggregates."""

    spec: SweepSpec
    frame: pd.DataFrame
    errors: List[str] = field(default_factory=list)

    def usable(self, include_max_iterations: bool = False) -> pd.Series:
        statuses = ["converged", "max-iterations"] if include_max_iterations else ["converged"]
        return self.frame["status"].isin(statuses) & np.isfinite(self.frame["latency_s"])

    def summary(self, include_max_iterations: bool = False) -> pd.DataFrame:
        """Mean latency, standard error, trial count and failures per (grid value, scheme)."""
        frame = self.frame.assign(ok=self.usable(include_max_iterations))
        records = []
        for (value, scheme), cell in frame.groupby(["param_value", "scheme"], sort=False):
            values = cell.loc[cell["ok"], "latency_s"].to_numpy(dtype=float)
            n = len(values)
            records.append({
                "param_name": self.spec.param,
                "param_value": value,
                "scheme": scheme,
                "mean_latency_s": float(values.mean()) if n else math.nan,
                "stderr_s": float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan,
                "n": n,
                "failures": int(len(cell) - n),
            })
        return pd.DataFrame.from_records(records, columns=SUMMARY_COLUMNS)

    def paired(self, include_max_iterations: bool = False) -> pd.DataFrame:
        """
        Latency per scheme for trials where every scheme succeeded, indexed by
        (param_value, trial); trials with any failure are dropped and counted in the log.
        """
        frame = self.frame.assign(ok=self.usable(include_max_iterations))
        wide = frame.pivot(index=["param_value", "trial"], columns="scheme", values="latency_s")
        ok = frame.pivot(index=["param_value", "trial"], columns="scheme", values="ok")
        keep = ok.reindex(columns=list(self.spec.schemes)).fillna(False).astype(bool).all(axis=1)
        dropped = int((~keep).sum())
        if dropped:
            logger.warning(f"Paired comparison drops {dropped} trial(s) with a failed scheme")
        return wide.loc[keep, list(self.spec.schemes)]

    def all_failed(self) -> bool:
        return not bool(self.usable(include_max_iterations=True).any())

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.frame.to_csv(path, columns=SWEEP_COLUMNS, **CSV_OPTIONS)
        return path

    def summary_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.summary().to_csv(path, **CSV_OPTIONS)
        return path


def _ordered(rows: Iterable[Dict[str, object]], spec: SweepSpec) -> pd.DataFrame:
    frame = pd.DataFrame.from_records(list(rows), columns=SWEEP_COLUMNS)
    rank = {s: j for j, s in enumerate(spec.schemes)}
    frame["_rank"] = frame["scheme"].map(rank)
    frame = frame.sort_values(["param_value", "_rank", "trial"], kind="mergesort").drop(columns="_rank")
    return frame.reset_index(drop=True)


def run_sweep(spec: SweepSpec, threads: int = 1, progress: bool = False) -> SweepResult:
    """
    Run every scheme on every (grid value, trial) pair.

    Args:
        spec: Sweep definition
        threads: Worker processes; 1 runs serially in this process
        progress: Show a tqdm bar on stderr

    Returns:
        SweepResult whose rows are ordered by grid value, scheme and trial
    """
    tasks = [(value, trial) for value in spec.grid for trial in range(spec.trials)]
    worker = partial(_run_trial, spec=spec)
    logger.info(f"Sweep over {spec.param}: {len(spec.grid)} values x {spec.trials} trials "
                f"x {len(spec.schemes)} schemes on {threads} worker(s)")

    bar = dict(total=len(tasks), desc=f"sweep {spec.param}", disable=not progress)
    if threads <= 1:
        outcomes = [worker(task) for task in tqdm(tasks, **bar)]
    else:
        with multiprocessing.Pool(processes=threads) as pool:
            outcomes = list(tqdm(pool.imap_unordered(worker, tasks), **bar))

    rows, errors = [], []
    for trial_rows, trial_errors in outcomes:
        rows.extend(trial_rows)
        errors.extend(trial_errors)
    for message in sorted(errors):
        logger.error(f"Trial failure: {message}")
    result = SweepResult(spec, _ordered(rows, spec), sorted(errors))
    failures = int((~result.usable()).sum())
    if failures:
        logger.warning(f"{failures} of {len(result.frame)} scheme runs did not converge")
    return result


def solution_trace_frame(solution: SchemeSolution) -> pd.DataFrame:
    """Per-iteration trace of one scheme run; penalty columns are empty for FCBT."""
    rows = [(row.outer_iter, row.inner_iter, row.objective, row.residual, row.approx_error, row.lam, row.rho)
            for row in solution.trace]
    frame = pd.DataFrame.from_records(rows, columns=SOLUTION_TRACE_COLUMNS)
    return frame.astype({name: float for name in SOLUTION_TRACE_COLUMNS[2:]})


def write_solution_trace_csv(solution: SchemeSolution, path: Union[str, Path]) -> Path:
    path = Path(path)
    solution_trace_frame(solution).to_csv(path, **CSV_OPTIONS)
    return path


def _convergence_rows(task: int, config: NetworkConfig, scheme: str, outer: OuterLoopSettings,
                      solver: SolverSettings) -> List[Dict[str, object]]:
    seed = task
    try:
        solution = solve_scheme(scheme, build_instance(config, seed), outer, solver)
    except CacheLatencyError as e:
        logger.error(f"Convergence run {scheme} seed={seed} failed: {e}")
        return []
    if solution.status != "converged":
        logger.warning(f"Convergence run {scheme} seed={seed} ended with status {solution.status}")
    return [{
        "scheme": scheme,
        "seed": seed,
        "outer_iter": row.outer_iter,
        "inner_iter": row.inner_iter,
        "objective": row.objective,
        "approx_error": row.approx_error if scheme in APPROX_ERROR_SCHEMES else None,
        "lambda": row.lam,
        "rho": row.rho,
    } for row in solution.trace]


def run_convergence(config: NetworkConfig, scheme: str, seeds: Sequence[int],
                    outer: Optional[OuterLoopSettings] = None, solver: Optional[SolverSettings] = None,
                    threads: int = 1, progress: bool = False) -> pd.DataFrame:
    """
    Per-iteration trace of one scheme for each seed.

    The lambda and rho columns are empty for FCBT, which has no penalty loop;
    approx_error is filled for PCBT and PCPT only.
    """
    if scheme not in SCHEME_TAGS:
        raise ConfigError(f"unknown scheme '{scheme}'", key="scheme")
    if not len(seeds):
        raise ConfigError("no seeds given for the convergence run", key="seeds")
    worker = partial(_convergence_rows, config=config, scheme=scheme,
                     outer=outer or OuterLoopSettings(), solver=solver or SolverSettings())
    bar = dict(total=len(seeds), desc=f"convergence {scheme}", disable=not progress)
    if threads <= 1:
        chunks = [worker(seed) for seed in tqdm(list(seeds), **bar)]
    else:
        with multiprocessing.Pool(processes=threads) as pool:
            chunks = list(tqdm(pool.imap(worker, list(seeds)), **bar))
    rows = [row for chunk in chunks for row in chunk]
    frame = pd.DataFrame.from_records(rows, columns=CONVERGENCE_COLUMNS)
    return frame.astype({"approx_error": float, "lambda": float, "rho": float})


def write_convergence_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    frame.to_csv(path, columns=CONVERGENCE_COLUMNS, **CSV_OPTIONS)
    return path
