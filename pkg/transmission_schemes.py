#!/usr/bin/env python3
"""
transmission_schemes.py - Latency-minimizing transmission schemes.

Outer loops that repeatedly build and solve the convex subproblems of
subproblem_ir.py and turn the result into deployable beamformers:

Features:
- FCBT: SCA over beam vectors when every requested file is cached
- PCBT: penalty dual decomposition around an SCA inner loop over covariance
  matrices, followed by Gaussian randomization
- PCPT: the pipelined variant with phase-I beams on cached blocks and a
  per-outer-loop warm start
- TSWC: PCBT on an empty cache
- JCEO: max-min bulk-rate baseline (SCA only, no delay coupling)
- Randomized rank-one extraction with an LP power boost
- Scheme registry used by the experiments and the CLI

Dependencies:
    - numpy: pip install numpy
    - scipy: pip install scipy

Every driver returns a SchemeSolution and never raises for numerical
trouble: solver failures and iteration caps are reported through the status.
"""

import math
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy.optimize

from barrier_solver import SolverSettings, solve
from errors import (
    CacheLatencyError,
    ConfigError,
    InfeasibleExpansionPoint,
    RandomizationInfeasible,
    ZeroRate,
)
from network_model import (
    BeamformerSet,
    Instance,
    SchemeSolution,
    TraceRow,
    delay_tau,
    group_rates,
    latency,
    power_per_errh,
)
from subproblem_ir import (
    FcbtExpansion,
    PartialExpansion,
    active_rows,
    beams_from_vector,
    build_fcbt_subproblem,
    build_jceo_subproblem,
    build_pcbt_subproblem,
    build_pcpt_subproblem,
    fcbt_chi,
    fronthaul_matrix_value,
)

logger = logging.getLogger(__name__)

WARM_START_FORMS = ("verbatim", "log_ratio")
POWER_BACKOFF = 1e-3

# Stream ids for scheme-internal randomness, distinct from the instance streams.
INIT_STREAM = 11
RANDOMIZATION_STREAM = 12


@dataclass(frozen=True)
class OuterLoopSettings:
    """
    Parameters of the SCA and penalty loops.

    epsilon: final stop threshold on the penalty residual
    varsigma0 / epsilon0: initial multiplier-update and inner-stop thresholds
    lambda0 / rho0: initial multiplier and penalty parameter
    omega: shrink factor for rho, varsigma and the inner threshold
    nu: warm-start shrink of the phase-I rate tangent point
    delta: fraction of the fronthaul budget used by the initial fronthaul beams
    """

    epsilon: float = 1e-5
    varsigma0: float = 1e-3
    epsilon0: float = 1e-3
    lambda0: float = 0.5
    rho0: float = 0.5
    omega: float = 0.6
    nu: float = 0.1
    delta: float = 0.5
    max_inner: int = 100
    max_outer: int = 30
    n_candidates: int = 50
    rank_one_tol: float = 1e-6
    retangent_passes: int = 2
    start_margin: float = 1e-6
    warm_start_rate_form: str = "verbatim"
    swap_tol: float = 1e-7
    lift_scale: float = 1e-4

    def __post_init__(self):
        if not 0 < self.omega < 1:
            raise ConfigError(f"omega must lie in (0, 1), got {self.omega}", key="omega")
        if not 0 < self.nu < 1:
            raise ConfigError(f"nu must lie in (0, 1), got {self.nu}", key="nu")
        if not 0 < self.delta <= 1:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}", key="delta")
        for name in ("epsilon", "varsigma0", "epsilon0", "rho0", "rank_one_tol", "start_margin",
                     "swap_tol", "lift_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", key=name)
        for name in ("max_inner", "max_outer", "n_candidates"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        if self.retangent_passes < 1:
            raise ConfigError("retangent_passes must be >= 1", key="retangent_passes")
        if self.warm_start_rate_form not in WARM_START_FORMS:
            raise ConfigError(
                f"warm_start_rate_form must be one of {WARM_START_FORMS}", key="warm_start_rate_form"
            )


def _scheme_rng(instance: Instance, stream: int) -> np.random.Generator:
    seed = 0 if instance.seed is None else int(instance.seed)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


def _complex_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def _relative_change(new: float, old: float) -> float:
    if not math.isfinite(old):
        return math.inf
    return abs(new - old) / max(abs(old), 1e-300)


def _solution_status(accepted: int, error: Exception) -> str:
    if accepted == 0 and isinstance(error, InfeasibleExpansionPoint):
        return "infeasible-input"
    return "solver-failure"


# --------------------------------------------------------------------------
# FCBT
# --------------------------------------------------------------------------

def initial_fcbt_beams(instance: Instance) -> np.ndarray:
    """
    Channel-matched beams w_{g,i} proportional to the sum of the group's channels,
    scaled so each eRRH spends (1 - 1e-3) P_i split equally over the groups it serves.
    """
    config, cache, ch = instance.config, instance.cache, instance.channels
    G, N_t = cache.G, config.N_t
    w = np.zeros((G, config.stacked_dim), dtype=complex)
    for i in range(config.K_R):
        served = np.flatnonzero(cache.cached[:, i])
        if len(served) == 0:
            continue
        share = (1.0 - POWER_BACKOFF) * config.P[i] / len(served)
        for g in served:
            direction = ch.h[cache.users_in_group(g), i, :].sum(axis=0)
            norm = np.linalg.norm(direction)
            if norm == 0:
                direction, norm = np.ones(N_t, dtype=complex), math.sqrt(N_t)
            w[g, i * N_t:(i + 1) * N_t] = math.sqrt(share) * direction / norm
    return w


def solve_fcbt(instance: Instance, settings: Optional[OuterLoopSettings] = None,
               solver_settings: Optional[SolverSettings] = None) -> SchemeSolution:
    """
    Full-caching bulk transmission: SCA on problem variables eta, w_g, r_g.

    Every requested file is treated as cached at every eRRH. The loop stops when
    the relative change of eta is at most epsilon, or when a solve fails to
    decrease it.
    """
    settings = settings or OuterLoopSettings()
    inst = instance.full_cache()
    config, cache = inst.config, inst.cache
    size = cache.G * (config.N_t * config.K_R + 4)
    logger.info(f"FCBT: {cache.G} groups, {config.K_U} users, per-solve complexity ~O({size}^3.5)")

    w = initial_fcbt_beams(inst)
    trace: List[TraceRow] = []
    status, message = "max-iterations", ""
    relaxed = math.inf
    for inner in range(1, settings.max_inner + 1):
        try:
            ir = build_fcbt_subproblem(inst, FcbtExpansion(w, fcbt_chi(inst, w)),
                                       start_margin=settings.start_margin)
            report = solve(ir, solver_settings)
        except CacheLatencyError as e:
            status, message = _solution_status(len(trace), e), str(e)
            logger.warning(f"FCBT stopped at iteration {inner}: {e}")
            break
        if report.objective > relaxed:
            status = "converged"
            logger.info(f"FCBT: non-descent step at iteration {inner}; keeping the previous iterate")
            break
        N_t = config.N_t
        w = np.stack([beams_from_vector(report.values[f"w[{g}]"], active_rows(cache.cached[g], N_t),
                                        config.stacked_dim) for g in range(cache.G)])
        trace.append(TraceRow(0, inner, report.objective))
        logger.info(f"FCBT iteration {inner}: eta = {report.objective:.10g}")
        change = _relative_change(report.objective, relaxed)
        relaxed = report.objective
        if change <= settings.epsilon:
            status = "converged"
            break
    else:
        logger.warning(f"FCBT reached {settings.max_inner} iterations without converging")

    beams = BeamformerSet("fcbt", cache.group_of_user, config.N_t, w=w)
    r1 = group_rates(beams, inst.channels, config.sigma2, "full", cache.G)
    try:
        value = latency("fcbt", config.S, r1, None, 0.0, config.rate_floor)
    except ZeroRate as e:
        value, status, message = math.inf, "infeasible-input", str(e)
    return SchemeSolution(
        scheme="fcbt", beamformers=beams, r_g_phase1=r1, r_g_phase2=None, tau=0.0,
        latency=value, status=status, trace=tuple(trace),
        relaxed_latency=relaxed if math.isfinite(relaxed) else None, message=message,
    )


# --------------------------------------------------------------------------
# Partial caching state and initialization
# --------------------------------------------------------------------------

@dataclass
class PartialState:
    """Covariance iterate of the partial-caching schemes, all matrices at full size."""

    wbar: np.ndarray
    omega: np.ndarray
    w: Optional[np.ndarray] = None
    theta: Optional[float] = None
    r1: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None
    extras: Dict[str, float] = field(default_factory=dict)


def initialize_partial(instance: Instance, settings: Optional[OuterLoopSettings] = None) -> BeamformerSet:
    """
    Initial beams of the partial-caching schemes.

    Cached-block beams u_g and phase-I beams w_g are random. Fronthaul beams get
    v_{g,i} = sqrt(delta (e^{C_i} - 1) / sum_g c̄_{f_g,i}) v_i with a random unit
    v_i shared by the eRRH, and Omega_i = I. Each eRRH is then scaled (beams and
    Omega together, which leaves the fronthaul rate unchanged) to (1 - 1e-3) P_i.
    """
    settings = settings or OuterLoopSettings()
    config, cache = instance.config, instance.cache
    G, K_R, N_t = cache.G, config.K_R, config.N_t
    rng = _scheme_rng(instance, INIT_STREAM)

    wbar = np.zeros((G, K_R * N_t), dtype=complex)
    w = np.zeros((G, K_R * N_t), dtype=complex)
    omega = np.zeros((K_R, N_t, N_t), dtype=complex)
    for i in range(K_R):
        block = slice(i * N_t, (i + 1) * N_t)
        uncached = cache.uncached[:, i]
        count = int(uncached.sum())
        direction = _complex_normal(rng, N_t)
        direction /= np.linalg.norm(direction)
        for g in range(G):
            if cache.cached[g, i]:
                u = _complex_normal(rng, N_t)
                wbar[g, block] = u
                w[g, block] = _complex_normal(rng, N_t)
            elif count:
                wbar[g, block] = math.sqrt(settings.delta * math.expm1(config.C[i]) / count) * direction
        if count:
            omega[i] = np.eye(N_t)

        budget = (1.0 - POWER_BACKOFF) * config.P[i]
        power = float(np.sum(np.abs(wbar[:, block]) ** 2) + np.real(np.trace(omega[i])))
        if power > 0:
            scale = math.sqrt(budget / power)
            wbar[:, block] *= scale
            omega[i] *= scale ** 2
        phase1 = float(np.sum(np.abs(w[:, block]) ** 2))
        if phase1 > 0:
            w[:, block] *= math.sqrt(budget / phase1)
    return BeamformerSet("pcpt", cache.group_of_user, N_t, w=w, wbar=wbar, omega=omega)


def lift(beams: np.ndarray, epsilon: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """W_g = w_g w_g^H + epsilon I (on the masked rows only when a row mask is given)."""
    G, n = beams.shape
    mats = np.einsum("ga,gb->gab", beams, beams.conj())
    for g in range(G):
        rows = np.ones(n, dtype=bool) if mask is None else mask[g]
        mats[g] += epsilon * np.diag(rows.astype(float))
    return mats


def _lift_epsilon(instance: Instance, beams: np.ndarray, settings: OuterLoopSettings) -> float:
    config = instance.config
    norms = np.sum(np.abs(beams) ** 2, axis=1)
    positive = norms[norms > 0]
    smallest = float(positive.min()) / config.stacked_dim if len(positive) else 1.0
    return settings.lift_scale * min(min(config.P) / (instance.G * config.stacked_dim), smallest)


def _initial_state(instance: Instance, settings: OuterLoopSettings) -> PartialState:
    init = initialize_partial(instance, settings)
    config, cache = instance.config, instance.cache
    eps = _lift_epsilon(instance, init.wbar, settings)
    wbar = lift(init.wbar, eps)
    omega = np.array(init.omega)
    row_mask = np.repeat(cache.cached, config.N_t, axis=1).astype(bool)
    w = lift(init.w, eps, row_mask)
    return PartialState(wbar=wbar, omega=omega, w=w)


def _fronthaul_rates(instance: Instance, wbar: np.ndarray, omega: np.ndarray) -> Dict[int, float]:
    rates = {}
    for i in instance.cache.fronthaul_errhs():
        A = fronthaul_matrix_value(instance, wbar, omega, i)
        rates[i] = float(np.linalg.slogdet(A)[1] - np.linalg.slogdet(omega[i])[1])
    return rates


def _matrix_sinr_terms(instance: Instance, mats: np.ndarray, omega: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """(mu_k, chi_k) at covariance matrices: total received power plus noise, and without the own group."""
    ch, cache = instance.channels, instance.cache
    received = np.real(np.einsum("kab,gba->kg", ch.outer, mats))
    noise = np.asarray(instance.config.sigma2, dtype=float).copy()
    if omega is not None:
        noise += np.real(np.einsum("kia,iab,kib->k", ch.h.conj(), omega, ch.h))
    own = received[np.arange(ch.K_U), cache.group_of_user]
    mu = received.sum(axis=1) + noise
    return mu, mu - own


def _matrix_group_rates(instance: Instance, mats: np.ndarray, omega: Optional[np.ndarray]) -> np.ndarray:
    mu, chi = _matrix_sinr_terms(instance, mats, omega)
    per_user = np.log(mu) - np.log(chi)
    return np.array([per_user[instance.cache.users_in_group(g)].min() for g in range(instance.G)])


def penalty_residual(instance: Instance, state: PartialState) -> Tuple[float, float]:
    """
    (S/theta - min_i g_i, |theta - S / min_i g_i|): the signed stop-rule residual
    and the approximation error of the delay surrogate.
    """
    S = instance.config.S
    worst = min(_fronthaul_rates(instance, state.wbar, state.omega).values())
    residual = S / state.theta - worst
    approx = abs(state.theta - S / worst) if worst > 0 else math.inf
    return residual, approx


def _warm_start_ratio(mu: float, chi: float, form: str) -> float:
    ratio = math.log(mu / chi)
    if form == "verbatim":
        verbatim = math.log(mu) / math.log(chi) if chi != 1.0 else math.inf
        if math.isfinite(verbatim) and verbatim > 0:
            return verbatim
    return ratio


def warm_start(instance: Instance, state: PartialState, settings: OuterLoopSettings) -> None:
    """
    Reset theta, r1, psi and kappa at the start of an outer iteration:
    theta = S / min_i g_i, r1 = min(nu min(min_k rate ratio, S / (tau0 + theta)), achieved),
    psi = theta r1 and kappa = S - (tau0 + theta) r1.

    achieved is the phase-I rate of the current W_g, so the tangent point is
    always reachable from the start point of the next subproblem.
    """
    config, cache = instance.config, instance.cache
    S, tau0 = config.S, config.tau0
    rates = _fronthaul_rates(instance, state.wbar, state.omega)
    state.theta = S / min(rates.values())
    mu, chi = _matrix_sinr_terms(instance, state.w, None)
    r1 = np.zeros(cache.G)
    for g in range(cache.G):
        if cache.cached[g].sum() == 0:
            continue
        members = cache.users_in_group(g)
        best = min(_warm_start_ratio(mu[k], chi[k], settings.warm_start_rate_form) for k in members)
        achieved = min(math.log(mu[k] / chi[k]) for k in members)
        r1[g] = min(settings.nu * min(best, S / (tau0 + state.theta)), achieved)
    state.r1 = r1
    state.psi = state.theta * r1
    state.kappa = S - (tau0 + state.theta) * r1


def _expansion(state: PartialState) -> PartialExpansion:
    return PartialExpansion(wbar=state.wbar, omega=state.omega, theta=state.theta, w=state.w,
                            r1=state.r1, psi=state.psi, kappa=state.kappa)


def _absorb(instance: Instance, state: PartialState, values: Dict[str, object]) -> None:
    """Copy an accepted subproblem solution into the iterate."""
    config, cache = instance.config, instance.cache
    S, tau0 = config.S, config.tau0
    for g in range(cache.G):
        state.wbar[g] = values[f"Wbar[{g}]"]
        key = f"W[{g}]"
        if key in values:
            rows = active_rows(cache.cached[g], config.N_t)
            state.w[g][np.ix_(rows, rows)] = values[key]
    for i in cache.fronthaul_errhs():
        state.omega[i] = values[f"Omega[{i}]"]
    if "theta" in values:
        state.theta = float(values["theta"])
    if state.r1 is not None:
        for g in range(cache.G):
            if f"r1[{g}]" not in values:
                continue
            r1 = float(values[f"r1[{g}]"])
            state.r1[g] = r1
            state.psi[g] = float(values.get(f"psi[{g}]", state.theta * r1))
            state.kappa[g] = float(values.get(f"kappa[{g}]", max(S - (tau0 + state.theta) * r1, 0.0)))
    state.extras = {"eta": float(values["eta"])}


def _relaxed_latency(instance: Instance, scheme: str, state: PartialState) -> Optional[float]:
    config = instance.config
    try:
        r2 = _matrix_group_rates(instance, state.wbar, state.omega)
        rates = _fronthaul_rates(instance, state.wbar, state.omega)
        tau = config.tau0 + config.S / min(rates.values()) if rates else 0.0
        r1 = None
        if scheme == "pcpt":
            r1 = np.where(instance.cache.cached.sum(axis=1) > 0,
                          _matrix_group_rates(instance, state.w, None), 0.0)
            r1 = np.minimum(r1, config.S / tau)
        return latency(scheme, config.S, r1, r2, tau, config.rate_floor)
    except (CacheLatencyError, ValueError):
        return None


# --------------------------------------------------------------------------
# Rank-one extraction
# --------------------------------------------------------------------------

def _candidate_lp(directions: np.ndarray, omega: Optional[np.ndarray], instance: Instance,
                  targets: np.ndarray, settings: OuterLoopSettings, scale: float = 1.0,
                  fronthaul_caps: Optional[Dict[int, float]] = None) -> Optional[np.ndarray]:
    """
    Power factors p_g minimizing sum p_g with every member meeting scale * target
    rate. The fronthaul log-det is replaced by its tangent in p (a conservative
    linear constraint), re-tangented settings.retangent_passes times. Each
    fronthaul rate is held below min(C_i, fronthaul_caps[i]) when caps are given.

    Returns:
        p, or None when the LP is infeasible
    """
    config, cache, ch = instance.config, instance.cache, instance.channels
    G, N_t = cache.G, config.N_t
    active = np.array([np.any(directions[g]) for g in range(G)])
    gains = np.abs(ch.stacked.conj() @ directions.T) ** 2
    noise = np.asarray(config.sigma2, dtype=float).copy()
    omega_power = np.zeros(config.K_R)
    if omega is not None:
        noise += np.real(np.einsum("kia,iab,kib->k", ch.h.conj(), omega, ch.h))
        omega_power = np.real(np.trace(omega, axis1=1, axis2=2))

    rows, rhs = [], []
    for k in range(config.K_U):
        g_k = cache.group_of_user[k]
        if not active[g_k]:
            continue
        gamma = math.expm1(scale * targets[g_k])
        row = gamma * gains[k]
        row[g_k] = -gains[k, g_k]
        rows.append(row)
        rhs.append(-gamma * noise[k])
    block_power = (np.abs(directions) ** 2).reshape(G, config.K_R, N_t).sum(axis=2)
    for i in range(config.K_R):
        rows.append(block_power[:, i])
        rhs.append(config.P[i] - omega_power[i])

    fronthaul = cache.fronthaul_errhs() if omega is not None else []
    p0 = np.ones(G)
    bounds = [(0, None) if active[g] else (0, 0) for g in range(G)]
    p = None
    for _ in range(settings.retangent_passes):
        tangent_rows, tangent_rhs = [], []
        for i in fronthaul:
            blocks = directions[:, i * N_t:(i + 1) * N_t]
            outer = np.einsum("ga,gb->gab", blocks, blocks.conj()) * cache.uncached[:, i][:, None, None]
            A0 = omega[i] + np.tensordot(p0, outer, axes=1)
            A0_inv = np.linalg.inv(A0)
            slope = np.real(np.einsum("ab,gba->g", A0_inv, outer))
            _, logdet_a = np.linalg.slogdet(A0)
            _, logdet_o = np.linalg.slogdet(omega[i])
            tangent_rows.append(slope)
            cap = min(config.C[i], fronthaul_caps.get(i, math.inf)) if fronthaul_caps else config.C[i]
            tangent_rhs.append(cap + logdet_o - logdet_a + slope @ p0)
        result = scipy.optimize.linprog(
            c=np.ones(G),
            A_ub=np.array(rows + tangent_rows),
            b_ub=np.array(rhs + tangent_rhs),
            bounds=bounds,
            method="highs",
            options={"primal_feasibility_tolerance": 1e-10},
        )
        if result.status != 0:
            return None
        p = np.maximum(result.x, 0.0)
        p0 = p
    return p


def _evaluate_candidate(instance: Instance, scheme: str, beams: np.ndarray,
                        omega: Optional[np.ndarray], phase: str) -> float:
    config, cache = instance.config, instance.cache
    if phase == "full":
        candidate = BeamformerSet(scheme, cache.group_of_user, config.N_t, w=beams)
        rates = group_rates(candidate, instance.channels, config.sigma2, "full", cache.G)
        served = np.array([np.any(beams[g]) for g in range(cache.G)])
        return float(np.max(config.S / np.maximum(rates[served], config.rate_floor)))
    candidate = BeamformerSet(scheme, cache.group_of_user, config.N_t, wbar=beams, omega=omega)
    rates = group_rates(candidate, instance.channels, config.sigma2, "partial", cache.G)
    try:
        tau = delay_tau(config.S, candidate, cache, config.tau0, config.rate_floor, config.eig_floor)
        return latency("pcbt", config.S, None, rates, tau, config.rate_floor)
    except CacheLatencyError:
        return math.inf


def _as_beam_set(instance: Instance, scheme: str, beams: np.ndarray, omega: Optional[np.ndarray],
                 phase: str) -> BeamformerSet:
    config, cache = instance.config, instance.cache
    if phase == "full":
        return BeamformerSet(scheme, cache.group_of_user, config.N_t, w=beams)
    return BeamformerSet(scheme, cache.group_of_user, config.N_t, wbar=beams, omega=omega)


def randomize_rank_one(W_set: np.ndarray, Omega: Optional[np.ndarray], instance: Instance,
                       r_targets: np.ndarray, settings: Optional[OuterLoopSettings] = None,
                       scheme: str = "pcbt", phase: str = "partial",
                       rng: Optional[np.random.Generator] = None,
                       fronthaul_caps: Optional[Dict[int, float]] = None) -> BeamformerSet:
    """
    Deployable beams from relaxed covariance matrices.

    When every W_g is rank one within settings.rank_one_tol (second over first
    eigenvalue) the dominant eigenvectors are returned as they are. Otherwise
    candidates sqrt(p_g) U_g Lambda_g^{1/2} e_g are drawn, their power factors
    come from the power-boost LP, and the candidate with the smallest latency wins.

    Args:
        W_set: (G, n, n) relaxed covariances (zero matrices for absent groups)
        Omega: (K_R, N_t, N_t) quantization covariances, None for phase-I beams
        r_targets: per-group rate targets from the relaxed solution
        phase: 'partial' (bulk / phase-II beams) or 'full' (phase-I beams)
        fronthaul_caps: per-eRRH fronthaul rate limits below C_i, usually the
            relaxed solution's own fronthaul rates

    Raises:
        RandomizationInfeasible: no candidate meets the targets
    """
    settings = settings or OuterLoopSettings()
    W_set = np.asarray(W_set, dtype=complex)
    G, n, _ = W_set.shape
    evals, evecs = np.linalg.eigh(W_set)
    evals = np.clip(evals, 0.0, None)

    rank_one = True
    for g in range(G):
        top = evals[g, -1]
        if top > 0 and n > 1 and evals[g, -2] > settings.rank_one_tol * top:
            rank_one = False
    if rank_one:
        beams = np.sqrt(evals[:, -1])[:, None] * evecs[:, :, -1]
        logger.debug("Relaxed solution is rank one; eigenvectors used directly")
        return _as_beam_set(instance, scheme, beams, Omega, phase)

    rng = rng or _scheme_rng(instance, RANDOMIZATION_STREAM)
    factors = evecs * np.sqrt(evals)[:, None, :]
    best_value, best_beams = math.inf, None
    for j in range(settings.n_candidates):
        directions = np.einsum("gab,gb->ga", factors, _complex_normal(rng, (G, n)))
        p = _candidate_lp(directions, Omega, instance, r_targets, settings, fronthaul_caps=fronthaul_caps)
        if p is None:
            continue
        beams = np.sqrt(p)[:, None] * directions
        value = _evaluate_candidate(instance, scheme, beams, Omega, phase)
        logger.debug(f"Candidate {j}: latency {value:.6g}")
        if value < best_value:
            best_value, best_beams = value, beams
    if best_beams is None:
        raise RandomizationInfeasible(f"none of {settings.n_candidates} candidates met the rate targets")
    return _as_beam_set(instance, scheme, best_beams, Omega, phase)


def dominant_eigen_fallback(W_set: np.ndarray, Omega: Optional[np.ndarray], instance: Instance,
                            r_targets: np.ndarray, settings: Optional[OuterLoopSettings] = None,
                            scheme: str = "pcbt", phase: str = "partial",
                            fronthaul_caps: Optional[Dict[int, float]] = None) -> BeamformerSet:
    """
    Dominant-eigenvector beams with power factors meeting the largest common
    fraction of the rate targets (found by bisection). The unscaled dominant
    component never exceeds the relaxed power or fronthaul use, so it is kept
    when no positive fraction is attainable.
    """
    settings = settings or OuterLoopSettings()
    evals, evecs = np.linalg.eigh(np.asarray(W_set, dtype=complex))
    directions = np.sqrt(np.clip(evals[:, -1], 0.0, None))[:, None] * evecs[:, :, -1]
    low, high, best = 0.0, 1.0, None
    for _ in range(40):
        mid = 0.5 * (low + high)
        p = _candidate_lp(directions, Omega, instance, r_targets, settings, scale=mid,
                          fronthaul_caps=fronthaul_caps)
        if p is None:
            high = mid
        else:
            low, best = mid, p
    p = best if best is not None else np.ones(len(directions))
    logger.warning(f"Randomization fallback: dominant eigenvectors at {low:.3f} of the rate targets")
    return _as_beam_set(instance, scheme, np.sqrt(p)[:, None] * directions, Omega, phase)


def _extract(W_set, Omega, instance, targets, settings, scheme, phase, caps=None) -> Tuple[BeamformerSet, bool]:
    try:
        return randomize_rank_one(W_set, Omega, instance, targets, settings, scheme, phase,
                                  fronthaul_caps=caps), False
    except RandomizationInfeasible as e:
        logger.warning(f"{scheme.upper()}: {e}")
        return dominant_eigen_fallback(W_set, Omega, instance, targets, settings, scheme, phase, caps), True


# --------------------------------------------------------------------------
# Partial-caching drivers
# --------------------------------------------------------------------------

def _delegate(solution: SchemeSolution, scheme: str, flag: str) -> SchemeSolution:
    beams = solution.beamformers
    if solution.scheme == "fcbt":
        K_R = beams.K_R
        beams = BeamformerSet(scheme, beams.group_of_user, beams.N_t, w=beams.w, wbar=beams.w,
                              omega=np.zeros((K_R, beams.N_t, beams.N_t)))
        return replace(solution, scheme=scheme, beamformers=beams, r_g_phase2=solution.r_g_phase1,
                       flags=solution.flags + (flag,))
    beams = replace(beams, scheme=scheme)
    return replace(solution, scheme=scheme, beamformers=beams, flags=solution.flags + (flag,))


def _finish_partial(instance: Instance, scheme: str, state: PartialState, settings: OuterLoopSettings,
                    status: str, trace: List[TraceRow], flags: List[str], message: str) -> SchemeSolution:
    """Rank-one extraction and final evaluation with the model evaluators."""
    config, cache = instance.config, instance.cache
    relaxed = _relaxed_latency(instance, scheme, state)
    omega = np.array(state.omega)
    for i in range(config.K_R):
        if i not in cache.fronthaul_errhs():
            omega[i] = 0

    targets2 = _matrix_group_rates(instance, state.wbar, omega)
    # Extracted beams use no more fronthaul than the relaxed solution.
    caps = _fronthaul_rates(instance, state.wbar, omega)
    bulk, fell_back = _extract(state.wbar, omega, instance, targets2, settings, scheme, "partial", caps)
    if fell_back:
        flags.append("randomization-fallback")
    w = None
    if scheme == "pcpt":
        served = cache.cached.sum(axis=1) > 0
        mats = np.where(served[:, None, None], state.w, 0)
        targets1 = np.where(served, _matrix_group_rates(instance, mats, None), 0.0)
        phase1, fell_back = _extract(mats, None, instance, targets1, settings, scheme, "full")
        if fell_back and "randomization-fallback" not in flags:
            flags.append("randomization-fallback")
        w = phase1.w

    beams = BeamformerSet(scheme, cache.group_of_user, config.N_t, w=w, wbar=bulk.wbar, omega=omega)
    if np.any(power_per_errh(beams.wbar, config.N_t, omega) > np.asarray(config.P) * (1 + 1e-8)):
        logger.warning(f"{scheme.upper()}: extracted beams exceed a power budget")
    r2 = group_rates(beams, instance.channels, config.sigma2, "partial", cache.G)
    r1 = None
    try:
        tau = delay_tau(config.S, beams, cache, config.tau0, config.rate_floor, config.eig_floor)
        if w is not None:
            r1 = group_rates(beams, instance.channels, config.sigma2, "full", cache.G)
            r1 = np.where(cache.cached.sum(axis=1) > 0, r1, 0.0)
            if tau > 0:
                r1 = np.minimum(r1, config.S / tau)
        value = latency(scheme, config.S, r1, r2, tau, config.rate_floor)
    except CacheLatencyError as e:
        tau, value = math.nan, math.inf
        status, message = "solver-failure", str(e)
        logger.warning(f"{scheme.upper()}: extracted beams are not deliverable: {e}")
    return SchemeSolution(
        scheme=scheme, beamformers=beams, r_g_phase1=r1, r_g_phase2=r2, tau=tau, latency=value,
        status=status, trace=tuple(trace), flags=tuple(flags), relaxed_latency=relaxed, message=message,
    )


def _build(instance: Instance, scheme: str, state: PartialState, lam: float, rho: float,
           settings: OuterLoopSettings):
    expansion = _expansion(state)
    margin = settings.start_margin
    if scheme == "pcpt":
        return build_pcpt_subproblem(instance, expansion, lam, rho, start_margin=margin,
                                     swap_tol=settings.swap_tol)
    if scheme == "jceo":
        return build_jceo_subproblem(instance, expansion, start_margin=margin)
    return build_pcbt_subproblem(instance, expansion, lam, rho, start_margin=margin)


def _solve_partial(instance: Instance, scheme: str, settings: OuterLoopSettings,
                   solver_settings: Optional[SolverSettings]) -> SchemeSolution:
    """
    Nested loops shared by PCBT, TSWC, PCPT and the max-min baseline.

    The inner loop re-solves the convex subproblem at the last accepted iterate
    until the relative objective change drops below the current threshold or a
    solve fails to decrease the objective. The outer loop updates the multiplier
    (residual within varsigma) or shrinks rho (otherwise), then tightens varsigma
    and the inner threshold.
    """
    config = instance.config
    coupled = scheme != "jceo" and bool(instance.cache.fronthaul_errhs())
    state = _initial_state(instance, settings)
    lam, rho = settings.lambda0, settings.rho0
    varsigma, eps_inner = settings.varsigma0, settings.epsilon0
    trace: List[TraceRow] = []
    flags: List[str] = []
    status, message = "max-iterations", ""
    outer_limit = settings.max_outer if coupled else 1

    for outer in range(1, outer_limit + 1):
        if scheme == "pcpt":
            warm_start(instance, state, settings)
        elif coupled and state.theta is None:
            state.theta = config.S / min(_fronthaul_rates(instance, state.wbar, state.omega).values())
        previous = math.inf
        inner_eps = eps_inner if coupled else settings.epsilon
        failed = None
        settled = False
        for inner in range(1, settings.max_inner + 1):
            try:
                ir = _build(instance, scheme, state, lam, rho, settings)
                if scheme == "pcpt" and any(note.startswith("groups") for note in ir.notes):
                    if "swap-rule" not in flags:
                        flags.append("swap-rule")
                report = solve(ir, solver_settings)
            except CacheLatencyError as e:
                failed = e
                break
            if report.objective > previous:
                logger.info(f"{scheme.upper()} outer {outer}: non-descent at inner {inner}; inner loop ends")
                settled = True
                break
            _absorb(instance, state, report.values)
            residual = approx = None
            if coupled:
                residual, approx = penalty_residual(instance, state)
            trace.append(TraceRow(outer, inner, report.objective, residual, approx,
                                  lam if coupled else None, rho if coupled else None))
            logger.info(f"{scheme.upper()} outer {outer} inner {inner}: objective {report.objective:.10g}"
                        + (f", residual {residual:.3e}" if coupled else ""))
            change = _relative_change(report.objective, previous)
            previous = report.objective
            if change <= inner_eps:
                settled = True
                break

        if failed is not None:
            status, message = _solution_status(len(trace), failed), str(failed)
            logger.warning(f"{scheme.upper()} stopped in outer iteration {outer}: {failed}")
            break
        if not coupled:
            status = "converged" if settled else "max-iterations"
            break

        residual, _ = penalty_residual(instance, state)
        if abs(residual) <= settings.epsilon:
            status = "converged"
            break
        if abs(residual) <= varsigma:
            lam += residual / rho
        else:
            rho *= settings.omega
        varsigma = settings.omega * abs(residual)
        eps_inner = max(settings.omega * eps_inner, settings.epsilon)
        logger.info(f"{scheme.upper()} outer {outer}: residual {residual:.3e}, lambda {lam:.6g}, rho {rho:.3e}")
    else:
        logger.warning(f"{scheme.upper()} reached {settings.max_outer} outer iterations without converging")

    if state.theta is None and instance.cache.fronthaul_errhs():
        state.theta = config.S / min(_fronthaul_rates(instance, state.wbar, state.omega).values())
    return _finish_partial(instance, scheme, state, settings, status, trace, flags, message)


def solve_pcbt(instance: Instance, settings: Optional[OuterLoopSettings] = None,
               solver_settings: Optional[SolverSettings] = None, delegate: bool = True) -> SchemeSolution:
    """
    Partial-caching bulk transmission.

    With no fronthaul traffic at all the problem is the full-caching one and
    FCBT is solved instead, unless delegate is False; the covariance loop then
    runs without the delay coupling.
    """
    settings = settings or OuterLoopSettings()
    if delegate and not instance.cache.fronthaul_errhs():
        return _delegate(solve_fcbt(instance, settings, solver_settings), "pcbt", "delegated-to-fcbt")
    return _solve_partial(instance, "pcbt", settings, solver_settings)


def solve_pcpt(instance: Instance, settings: Optional[OuterLoopSettings] = None,
               solver_settings: Optional[SolverSettings] = None, delegate: bool = True) -> SchemeSolution:
    """
    Partial-caching pipelined transmission.

    Full caching delegates to FCBT (tau = 0); an empty cache delegates to PCBT
    since no group can use phase I. With delegate False an empty cache runs the
    pipelined loop itself, every group taking the bulk latency constraint.
    """
    settings = settings or OuterLoopSettings()
    cache = instance.cache
    if not cache.fronthaul_errhs():
        return _delegate(solve_fcbt(instance, settings, solver_settings), "pcpt", "delegated-to-fcbt")
    if delegate and cache.cached.sum() == 0:
        solution = _solve_partial(instance, "pcbt", settings, solver_settings)
        return _delegate(solution, "pcpt", "delegated-to-pcbt")
    return _solve_partial(instance, "pcpt", settings, solver_settings)


def solve_tswc(instance: Instance, settings: Optional[OuterLoopSettings] = None,
               solver_settings: Optional[SolverSettings] = None) -> SchemeSolution:
    """Transmission without caching: PCBT with every cache emptied."""
    settings = settings or OuterLoopSettings()
    solution = _solve_partial(instance.zero_cache(), "tswc", settings, solver_settings)
    return solution


def solve_jceo_baseline(instance: Instance, settings: Optional[OuterLoopSettings] = None,
                        solver_settings: Optional[SolverSettings] = None) -> SchemeSolution:
    """Max-min bulk rate under power and fronthaul limits; latency = S / min r2 + tau."""
    settings = settings or OuterLoopSettings()
    if not instance.cache.fronthaul_errhs():
        return _delegate(solve_fcbt(instance, settings, solver_settings), "jceo", "delegated-to-fcbt")
    return _solve_partial(instance, "jceo", settings, solver_settings)


SchemeDriver = Callable[..., SchemeSolution]

SCHEMES: Dict[str, SchemeDriver] = {
    "fcbt": solve_fcbt,
    "pcbt": solve_pcbt,
    "pcpt": solve_pcpt,
    "tswc": solve_tswc,
    "jceo": solve_jceo_baseline,
}


def solve_scheme(tag: str, instance: Instance, settings: Optional[OuterLoopSettings] = None,
                 solver_settings: Optional[SolverSettings] = None) -> SchemeSolution:
    """Dispatch to the driver registered under tag."""
    try:
        driver = SCHEMES[tag]
    except KeyError:
        raise ConfigError(f"unknown scheme '{tag}' (choose from {', '.join(SCHEMES)})", key="scheme")
    return driver(instance, settings, solver_settings)
