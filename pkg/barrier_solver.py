#!/usr/bin/env python3
"""
barrier_solver.py - Primal log-barrier Newton solver for SubproblemIR.

Every constraint atom f(x) <= 0 contributes -ln(-f(x)), every scalar lower
bound contributes -ln(x - lb) and every Hermitian PSD block contributes
-ln det X. The centering problem t*f0(x) + barrier(x) is minimized by damped
Newton steps; t grows geometrically until the duality-gap estimate m/t is
small relative to the objective and the KKT residual meets its tolerance.

Features:
- Cholesky-based Newton steps with escalating diagonal regularization
- Fraction-to-the-boundary step cap for affine, log and log-det arguments
- Armijo backtracking that keeps every iterate strictly feasible, with atom
  slacks held above the round-off level of their terms
- KKT residual with fitted nonnegative multipliers for acceptance checks
- Optional per-step trace rows and CSV export

Dependencies:
    - numpy: pip install numpy
    - scipy: pip install scipy
    - pandas: pip install pandas
"""

import math
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.optimize

from errors import ConfigError, InfeasiblePoint, LineSearchStall, NumericalBreakdown
from subproblem_ir import AffineExpr, ConvexFunction, SubproblemIR

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["centering", "newton_step", "objective", "residual"]

# An atom value within this many ulps of its term magnitudes counts as zero.
ROUNDOFF_GUARD = 64.0 * np.finfo(float).eps


@dataclass(frozen=True)
class SolverSettings:
    """
    Barrier method parameters.

    newton_tol bounds the half squared Newton decrement that ends a centering
    step; gap_tol bounds the duality-gap estimate m/t relative to
    max(1, |objective|). Once the gap is met, up to kkt_centerings further
    centerings are spent bringing the KKT residual below kkt_tol.
    """

    t0: float = 1.0
    mu_growth: float = 10.0
    newton_tol: float = 1e-9
    gap_tol: float = 1e-8
    kkt_tol: float = 1e-8
    kkt_centerings: int = 3
    max_newton_steps: int = 80
    max_centerings: int = 40
    alpha: float = 0.01
    beta: float = 0.5
    boundary_fraction: float = 0.99
    regularization: float = 1e-10
    regularization_tries: int = 3
    max_backtracks: int = 60
    record_trace: bool = False

    def __post_init__(self):
        if not self.t0 > 0:
            raise ConfigError(f"t0 must be > 0, got {self.t0}", key="t0")
        if not self.mu_growth > 1:
            raise ConfigError(f"mu_growth must be > 1, got {self.mu_growth}", key="mu_growth")
        if not 0 < self.alpha < 0.5:
            raise ConfigError(f"alpha must lie in (0, 0.5), got {self.alpha}", key="alpha")
        if not 0 < self.beta < 1:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}", key="beta")
        if not 0 < self.boundary_fraction < 1:
            raise ConfigError("boundary_fraction must lie in (0, 1)", key="boundary_fraction")
        for name in ("newton_tol", "gap_tol", "kkt_tol", "regularization"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", key=name)
        for name in ("max_newton_steps", "max_centerings", "max_backtracks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        if self.kkt_centerings < 0:
            raise ConfigError("kkt_centerings must be >= 0", key="kkt_centerings")


@dataclass
class SolveReport:
    """
    Result of one barrier solve.

    status is 'converged' (gap and KKT tolerances met), 'max-iterations'
    (centering budget spent) or 'stalled' (a later centering could not make
    progress; x is the last completed center).
    """

    x: np.ndarray
    values: Dict[str, Union[float, np.ndarray]]
    objective: float
    kkt_residual: float
    duality_gap: float
    newton_steps: int
    centerings: int
    status: str
    t_final: float
    trace: List[Tuple[int, int, float, float]] = field(default_factory=list)

    @property
    def converged(self) -> bool:
        return self.status == "converged"


class _Barrier:
    """Value, gradient and Hessian of t*f0 + barrier for one IR."""

    def __init__(self, ir: SubproblemIR):
        self.ir = ir
        idx, low = ir.lower_bounds
        bounds = tuple(AffineExpr(np.array([j]), np.array([1.0]), -lb) for j, lb in zip(idx, low))
        self.fixed = ConvexFunction(neg_logs=bounds, neg_logdets=ir.psd_barriers)
        self.m = ir.barrier_count

    def atom_values(self, x: np.ndarray) -> Optional[List[float]]:
        """Atom values, or None when one is not negative beyond round-off."""
        values = []
        for atom in self.ir.constraints:
            f, scale = atom.function.value_and_scale(x)
            if not f < -ROUNDOFF_GUARD * scale:
                return None
            values.append(f)
        return values

    def in_domain(self, x: np.ndarray) -> bool:
        if not self.fixed.in_domain(x) or not self.ir.objective.in_domain(x):
            return False
        return self.atom_values(x) is not None

    def value(self, x: np.ndarray, t: float) -> float:
        if not self.fixed.in_domain(x) or not self.ir.objective.in_domain(x):
            return math.inf
        atoms = self.atom_values(x)
        if atoms is None:
            return math.inf
        total = t * self.ir.objective.value(x) + self.fixed.value(x)
        for f in atoms:
            total -= math.log(-f)
        return total

    def atom_derivatives(self, x: np.ndarray) -> List[Tuple[float, np.ndarray, np.ndarray]]:
        result = []
        for atom in self.ir.constraints:
            f, g, H = atom.function.derivatives(x)
            if not f < 0:
                raise InfeasiblePoint(f"constraint {atom.label} is not strictly satisfied ({f:.3e})")
            result.append((f, g, H))
        return result

    def barrier_derivatives(self, x: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """Derivatives of the barrier alone (bounds, PSD blocks and atoms)."""
        value, grad, hess = self.fixed.derivatives(x)
        for f, g, H in self.atom_derivatives(x):
            value -= math.log(-f)
            grad += g / (-f)
            hess += np.outer(g, g) / f ** 2 + H / (-f)
        return value, grad, hess

    def derivatives(self, x: np.ndarray, t: float) -> Tuple[float, np.ndarray, np.ndarray, float]:
        f0, g0, H0 = self.ir.objective.derivatives(x)
        value, grad, hess = self.barrier_derivatives(x)
        return t * f0 + value, t * g0 + grad, t * H0 + hess, f0

    def max_step(self, x: np.ndarray, dx: np.ndarray) -> float:
        """Largest step keeping every log and log-det argument positive."""
        step = math.inf
        functions = [self.fixed, self.ir.objective] + [a.function for a in self.ir.constraints]
        for fn in functions:
            for arg in fn.neg_logs:
                step = min(step, _affine_limit(arg.value(x), float(arg.coef @ dx[arg.idx])))
            for r in fn.reciprocals:
                step = min(step, _affine_limit(x[r.index], dx[r.index]))
            for M in fn.neg_logdets:
                D = M.direction(dx)
                if not np.any(D):
                    continue
                top = scipy.linalg.eigh(-D, M.evaluate(x), eigvals_only=True)[-1]
                if top > 0:
                    step = min(step, 1.0 / top)
        return step


def _affine_limit(value: float, slope: float) -> float:
    if slope >= 0:
        return math.inf
    return value / -slope


def _newton_direction(H: np.ndarray, g: np.ndarray, settings: SolverSettings) -> np.ndarray:
    shift = 0.0
    for attempt in range(settings.regularization_tries + 1):
        try:
            factor = scipy.linalg.cho_factor(H + shift * np.eye(len(g)), lower=True)
            dx = -scipy.linalg.cho_solve(factor, g)
            if np.all(np.isfinite(dx)):
                if attempt:
                    logger.debug(f"Newton system regularized with {shift:.1e}")
                return dx
        except (np.linalg.LinAlgError, ValueError):
            pass
        scale = max(1.0, float(np.max(np.abs(np.diag(H))))) if np.all(np.isfinite(H)) else 1.0
        shift = settings.regularization * scale * (100.0 ** attempt)
    raise NumericalBreakdown(f"Hessian factorization failed after {settings.regularization_tries} regularizations")


def _center(barrier: _Barrier, x: np.ndarray, t: float, settings: SolverSettings,
            centering: int, trace: Optional[list]) -> Tuple[np.ndarray, int]:
    """Minimize t*f0 + barrier from a strictly feasible x; returns (x, newton steps)."""
    steps = 0
    for steps in range(1, settings.max_newton_steps + 1):
        value, grad, hess, f0 = barrier.derivatives(x, t)
        dx = _newton_direction(hess, grad, settings)
        decrement = float(-grad @ dx) / 2.0
        if trace is not None:
            trace.append((centering, steps, f0, decrement))
        if decrement <= settings.newton_tol:
            return x, steps

        step = min(1.0, settings.boundary_fraction * barrier.max_step(x, dx))
        slope = float(grad @ dx)
        accepted = False
        for _ in range(settings.max_backtracks):
            candidate = x + step * dx
            new_value = barrier.value(candidate, t)
            if new_value <= value + settings.alpha * step * slope:
                accepted = True
                break
            step *= settings.beta
        if not accepted:
            if decrement <= math.sqrt(settings.newton_tol):
                logger.debug(f"Line search stalled near the center (decrement {decrement:.2e}); accepted")
                return x, steps
            raise LineSearchStall(f"no descent step at t={t:.3e} (decrement {decrement:.3e})")
        x = candidate
    logger.debug(f"Centering {centering} hit {settings.max_newton_steps} Newton steps at t={t:.3e}")
    return x, steps


def solve(ir: SubproblemIR, settings: Optional[SolverSettings] = None) -> SolveReport:
    """
    Solve a convex subproblem from its strictly feasible start point.

    Args:
        ir: Subproblem to solve
        settings: Barrier parameters (defaults when omitted)

    Returns:
        SolveReport with status 'converged', 'max-iterations' or 'stalled'

    Raises:
        InfeasiblePoint: the start point is not strictly feasible
        LineSearchStall: backtracking found no descent step in the first centering
        NumericalBreakdown: the Newton system could not be factorized in the first centering
    """
    settings = settings or SolverSettings()
    barrier = _Barrier(ir)
    x = np.array(ir.start, dtype=float)
    if not barrier.in_domain(x):
        raise InfeasiblePoint(f"{ir.name}: start point violates {', '.join(ir.violations(x)[:5]) or 'the domain'}")

    trace = [] if settings.record_trace else None
    t = settings.t0
    total_steps = 0
    status = "max-iterations"
    centerings = 0
    residual = math.nan
    extra = 0
    for centerings in range(1, settings.max_centerings + 1):
        try:
            centered, steps = _center(barrier, x, t, settings, centerings, trace)
        except (LineSearchStall, NumericalBreakdown) as e:
            if centerings == 1:
                raise
            logger.debug(f"{ir.name}: centering {centerings} failed ({e}); keeping the previous center")
            t /= settings.mu_growth
            status = "stalled"
            break
        x = centered
        total_steps += steps
        if barrier.m / t <= settings.gap_tol * max(1.0, abs(ir.objective.value(x))):
            residual = kkt_residual(ir, x, t)
            if residual <= settings.kkt_tol:
                status = "converged"
                break
            if extra >= settings.kkt_centerings:
                break
            extra += 1
        t *= settings.mu_growth

    objective = ir.objective.value(x)
    if not status == "converged":
        residual = kkt_residual(ir, x, t)
    logger.debug(
        f"{ir.name}: {status} after {centerings} centerings / {total_steps} Newton steps, "
        f"objective {objective:.10g}, gap {barrier.m / t:.2e}, residual {residual:.2e}"
    )
    return SolveReport(
        x=x,
        values=ir.unpack(x),
        objective=objective,
        kkt_residual=residual,
        duality_gap=barrier.m / t,
        newton_steps=total_steps,
        centerings=centerings,
        status=status,
        t_final=t,
        trace=trace or [],
    )


def kkt_residual(ir: SubproblemIR, point: np.ndarray, t: Optional[float] = None,
                 settings: Optional[SolverSettings] = None) -> float:
    """
    KKT residual at a strictly feasible point.

    Nonnegative multipliers for the atoms and lower bounds are fitted by
    bounded least squares on stationarity and complementarity,

        min_{lam >= 0} || grad f0 + Z + sum_i lam_i grad f_i ||^2 + sum_i (lam_i f_i)^2,

    and the square root of the minimum is returned. Z is the gradient of the
    PSD-block barrier divided by t; t defaults to m / gap_tol.

    Raises:
        InfeasiblePoint: the point lies outside the barrier domain
    """
    barrier = _Barrier(ir)
    point = np.asarray(point, dtype=float)
    if not barrier.in_domain(point):
        raise InfeasiblePoint(f"{ir.name}: point is outside the barrier domain")
    if t is None:
        settings = settings or SolverSettings()
        t = max(barrier.m, 1) / settings.gap_tol
    _, stationarity, _ = ir.objective.derivatives(point)
    if ir.psd_barriers:
        _, g_psd, _ = ConvexFunction(neg_logdets=ir.psd_barriers).derivatives(point)
        stationarity = stationarity + g_psd / t

    columns, slacks = [], []
    for f, g, _ in barrier.atom_derivatives(point):
        columns.append(g)
        slacks.append(-f)
    idx, low = ir.lower_bounds
    for j, lb in zip(idx, low):
        g = np.zeros(len(point))
        g[j] = -1.0
        columns.append(g)
        slacks.append(point[j] - lb)
    if not columns:
        return float(np.linalg.norm(stationarity))

    J = np.column_stack(columns)
    A = np.vstack((J, np.diag(slacks)))
    b = np.concatenate((-stationarity, np.zeros(len(slacks))))
    fit = scipy.optimize.lsq_linear(A, b, bounds=(0.0, np.inf), method="bvls")
    return float(np.linalg.norm(A @ fit.x - b))


def trace_frame(report: SolveReport) -> pd.DataFrame:
    return pd.DataFrame(report.trace, columns=TRACE_COLUMNS)


def write_trace_csv(report: SolveReport, path: Union[str, Path]) -> Path:
    """Write the per-Newton-step trace of a solve as CSV."""
    path = Path(path)
    trace_frame(report).to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
    logger.info(f"Solver trace written to {path}")
    return path
