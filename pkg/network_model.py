#!/usr/bin/env python3
"""
network_model.py - Domain types and closed-form evaluators for cache-enabled
multigroup multicast radio access networks.

This module holds everything the schemes and the experiments need to describe a
network and to score a set of beamformers on it:

Features:
- NetworkConfig with validation, dB convenience and per-eRRH broadcasting
- Seeded instance generation (geometry, path loss, fading, caches, requests)
- SINR evaluators for full caching and for partial caching with quantization noise
- Fronthaul rate, fetch delay and per-scheme latency evaluators
- Block selector and mask helpers shared with the subproblem builders
- Result types (TraceRow, SchemeSolution) shared by every scheme driver

Dependencies:
    - numpy: pip install numpy
    - Standard library modules: math, logging, dataclasses, functools, typing

All evaluators are pure functions of their inputs. Bandwidth is 1 Hz throughout,
so nats/Hz and nats coincide numerically.
"""

import math
import logging
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import (
    ConfigError,
    DegenerateFronthaul,
    NonPositiveDefiniteOmega,
    ZeroRate,
)

logger = logging.getLogger(__name__)

SCHEME_TAGS = ("fcbt", "pcbt", "pcpt", "tswc", "jceo")
GROUP_ASSIGNMENTS = ("balanced", "redraw", "free")
REQUEST_DISTRIBUTIONS = ("uniform", "zipf")

SCHEME_STATUSES = ("converged", "max-iterations", "infeasible-input", "solver-failure")

DEFAULT_RATE_FLOOR = 1e-9
DEFAULT_EIG_FLOOR = 1e-10
MAX_REDRAWS = 10000

PerErrh = Union[float, Sequence[float]]


def db_to_linear(value_db: float) -> float:
    """Convert a power ratio in dB (relative to unit noise) to linear scale."""
    return 10.0 ** (value_db / 10.0)


def _broadcast(name: str, value, length: int) -> Tuple[float, ...]:
    if np.isscalar(value):
        return tuple(float(value) for _ in range(length))
    values = tuple(float(v) for v in value)
    if len(values) != length:
        raise ConfigError(f"{name} must have length {length}, got {len(values)}", key=name)
    return values


@dataclass(frozen=True)
class NetworkConfig:
    """
    Counts, powers, capacities, cache sizes and geometry of one network.

    P, C and sigma2 accept a scalar (broadcast) or one value per eRRH / user.
    B defaults to whole-file caches of floor(xi * F) files of size S each,
    i.e. floor(xi * F) * S rather than floor(xi * S * F). The two differ when
    xi * S * F is not a multiple of S, and only the former stores exactly the
    floor(xi * F) files that the cache placement assumes. Pass B explicitly
    for any other budget.
    """

    K_R: int = 3
    K_U: int = 6
    N_t: int = 1
    G: int = 3
    F: int = 10
    S: float = 1.5
    P: PerErrh = 100.0
    C: PerErrh = 2.0
    sigma2: PerErrh = 1.0
    B: Optional[PerErrh] = None
    tau0: float = 0.01
    xi: float = 0.5
    d0: float = 50.0
    alpha: float = 3.0
    cell_radius: float = 500.0
    group_assignment: str = "balanced"
    request_distribution: str = "uniform"
    zipf_exponent: float = 0.8
    rate_floor: float = DEFAULT_RATE_FLOOR
    eig_floor: float = DEFAULT_EIG_FLOOR

    def __post_init__(self):
        for name in ("K_R", "K_U", "N_t", "G", "F"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value}", key=name)
            object.__setattr__(self, name, int(value))
        if self.K_U < self.G:
            raise ConfigError(f"K_U ({self.K_U}) must be >= G ({self.G})", key="K_U")
        if self.G > self.F:
            raise ConfigError(f"G ({self.G}) cannot exceed the library size F ({self.F})", key="G")
        if not self.S > 0:
            raise ConfigError(f"S must be > 0, got {self.S}", key="S")
        if not 0.0 <= self.xi <= 1.0:
            raise ConfigError(f"xi must lie in [0, 1], got {self.xi}", key="xi")
        if self.tau0 < 0:
            raise ConfigError(f"tau0 must be >= 0, got {self.tau0}", key="tau0")
        for name in ("d0", "alpha", "cell_radius", "rate_floor", "eig_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0", key=name)
        if self.group_assignment not in GROUP_ASSIGNMENTS:
            raise ConfigError(
                f"group_assignment must be one of {GROUP_ASSIGNMENTS}, got '{self.group_assignment}'",
                key="group_assignment",
            )
        if self.request_distribution not in REQUEST_DISTRIBUTIONS:
            raise ConfigError(
                f"request_distribution must be one of {REQUEST_DISTRIBUTIONS}",
                key="request_distribution",
            )

        P = _broadcast("P", self.P, self.K_R)
        C = _broadcast("C", self.C, self.K_R)
        sigma2 = _broadcast("sigma2", self.sigma2, self.K_U)
        for name, values in (("P", P), ("C", C), ("sigma2", sigma2)):
            if min(values) <= 0:
                raise ConfigError(f"every entry of {name} must be > 0", key=name)
        if self.B is None:
            # Whole-file granularity: exactly floor(xi*F) files fit in each cache.
            B = tuple(math.floor(self.xi * self.F + 1e-12) * self.S for _ in range(self.K_R))
        else:
            B = _broadcast("B", self.B, self.K_R)
            if min(B) < 0:
                raise ConfigError("cache sizes B must be >= 0", key="B")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "B", B)

    @classmethod
    def from_xi(cls, xi: float, P_dB: Optional[float] = None, **kwargs) -> "NetworkConfig":
        """Build a config whose cache sizes follow the caching proportion xi."""
        if P_dB is not None:
            kwargs["P"] = db_to_linear(P_dB)
        kwargs.pop("B", None)
        return cls(xi=xi, **kwargs)

    def with_overrides(self, **kwargs) -> "NetworkConfig":
        """Return a copy with some fields replaced; B is re-derived when xi or S change."""
        if any(key in kwargs for key in ("xi", "S", "F", "K_R")) and "B" not in kwargs:
            kwargs["B"] = None
        if "K_R" in kwargs:
            for name in ("P", "C"):
                kwargs.setdefault(name, getattr(self, name)[0])
        if "K_U" in kwargs:
            kwargs.setdefault("sigma2", self.sigma2[0])
        return replace(self, **kwargs)

    @property
    def stacked_dim(self) -> int:
        return self.K_R * self.N_t

    def files_per_cache(self, i: int) -> int:
        return min(self.F, math.floor(self.B[i] / self.S + 1e-9))


@dataclass(frozen=True)
class ChannelSet:
    """
    Channel vectors h[k, i] (length N_t) for every user k and eRRH i.

    The stacked vector of user k concatenates the eRRH blocks in eRRH order,
    which is the block order used by block_selector.
    """

    h: np.ndarray
    errh_positions: Optional[np.ndarray] = None
    user_positions: Optional[np.ndarray] = None
    path_gain: Optional[np.ndarray] = None

    def __post_init__(self):
        h = np.array(self.h, dtype=complex)
        if h.ndim != 3:
            raise ValueError(f"h must have shape (K_U, K_R, N_t), got {h.shape}")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def K_U(self) -> int:
        return self.h.shape[0]

    @property
    def K_R(self) -> int:
        return self.h.shape[1]

    @property
    def N_t(self) -> int:
        return self.h.shape[2]

    @cached_property
    def stacked(self) -> np.ndarray:
        stacked = self.h.reshape(self.K_U, self.K_R * self.N_t)
        stacked.setflags(write=False)
        return stacked

    @cached_property
    def outer(self) -> np.ndarray:
        """H_k = h_k h_k^H for every user, shape (K_U, n, n)."""
        H = np.einsum("ka,kb->kab", self.stacked, self.stacked.conj())
        H.setflags(write=False)
        return H


@dataclass(frozen=True)
class CacheState:
    """
    Cache indicators c[f, i], requested file f_g per group and the user-to-group map.
    """

    c: np.ndarray
    f_g: np.ndarray
    group_of_user: np.ndarray

    def __post_init__(self):
        c = np.array(self.c, dtype=int)
        f_g = np.array(self.f_g, dtype=int)
        groups = np.array(self.group_of_user, dtype=int)
        if not np.isin(c, (0, 1)).all():
            raise ConfigError("cache indicators must be 0 or 1", key="c")
        if f_g.ndim != 1 or len(np.unique(f_g)) != len(f_g):
            raise ConfigError("each group must request a distinct file", key="f_g")
        if f_g.min() < 0 or f_g.max() >= c.shape[0]:
            raise ConfigError("requested file index out of range", key="f_g")
        if groups.min() < 0 or groups.max() >= len(f_g):
            raise ConfigError("user mapped to an unknown group", key="group_of_user")
        empty = sorted(set(range(len(f_g))) - set(groups.tolist()))
        if empty:
            raise ConfigError(f"groups {empty} have no users", key="group_of_user")
        for arr in (c, f_g, groups):
            arr.setflags(write=False)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "f_g", f_g)
        object.__setattr__(self, "group_of_user", groups)

    @property
    def G(self) -> int:
        return len(self.f_g)

    @property
    def K_R(self) -> int:
        return self.c.shape[1]

    @cached_property
    def cached(self) -> np.ndarray:
        """cached[g, i] = c[f_g, i]."""
        return self.c[self.f_g, :]

    @cached_property
    def uncached(self) -> np.ndarray:
        """uncached[g, i] = 1 - c[f_g, i]."""
        return 1 - self.cached

    def users_in_group(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.group_of_user == g)

    def fronthaul_errhs(self) -> List[int]:
        """eRRHs with at least one uncached requested file."""
        return [i for i in range(self.K_R) if self.uncached[:, i].sum() > 0]

    def check_capacity(self, config: NetworkConfig) -> None:
        used = self.c.sum(axis=0) * config.S
        for i, amount in enumerate(used):
            if amount > config.B[i] + 1e-9:
                raise ConfigError(
                    f"eRRH {i} caches {amount:.3f} nats but its cache holds {config.B[i]:.3f}",
                    key="B",
                )

    def with_indicators(self, c: np.ndarray) -> "CacheState":
        return CacheState(c=c, f_g=self.f_g, group_of_user=self.group_of_user)


@dataclass(frozen=True)
class Instance:
    """A network configuration together with one channel and cache draw."""

    config: NetworkConfig
    channels: ChannelSet
    cache: CacheState
    seed: Optional[int] = None

    @property
    def G(self) -> int:
        return self.cache.G

    @property
    def n(self) -> int:
        return self.config.stacked_dim

    def with_cache(self, c: np.ndarray) -> "Instance":
        return replace(self, cache=self.cache.with_indicators(c))

    def zero_cache(self) -> "Instance":
        return self.with_cache(np.zeros_like(self.cache.c))

    def full_cache(self) -> "Instance":
        return self.with_cache(np.ones_like(self.cache.c))


@dataclass(frozen=True)
class BeamformerSet:
    """
    Beamformers of one scheme.

    w holds cached-data beams (FCBT delivery, PCPT phase I), shape (G, n), zero on
    blocks whose eRRH does not cache the group's file. wbar holds the merged
    partial-caching beams u_g + v_g, shape (G, n). omega holds the quantization
    covariances, shape (K_R, N_t, N_t); eRRHs without fronthaul traffic carry zeros.
    """

    scheme: str
    group_of_user: np.ndarray
    N_t: int
    w: Optional[np.ndarray] = None
    wbar: Optional[np.ndarray] = None
    omega: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.scheme not in SCHEME_TAGS:
            raise ValueError(f"unknown scheme tag '{self.scheme}'")
        for name in ("w", "wbar", "omega"):
            value = getattr(self, name)
            if value is not None:
                value = np.array(value, dtype=complex)
                value.setflags(write=False)
                object.__setattr__(self, name, value)
        groups = np.array(self.group_of_user, dtype=int)
        groups.setflags(write=False)
        object.__setattr__(self, "group_of_user", groups)

    @property
    def K_R(self) -> int:
        beams = self.w if self.w is not None else self.wbar
        return beams.shape[1] // self.N_t

    def block(self, beams: np.ndarray, g: int, i: int) -> np.ndarray:
        return beams[g, i * self.N_t:(i + 1) * self.N_t]


@dataclass(frozen=True)
class TraceRow:
    """One accepted inner iteration of a scheme run."""

    outer_iter: int
    inner_iter: int
    objective: float
    residual: Optional[float] = None
    approx_error: Optional[float] = None
    lam: Optional[float] = None
    rho: Optional[float] = None


@dataclass(frozen=True)
class SchemeSolution:
    """
    Outcome of one scheme run on one instance.

    latency is always recomputed from the deployable beamformers with the
    evaluators of this module; relaxed_latency is the value predicted by the
    last convex subproblem before rank-one extraction.
    """

    scheme: str
    beamformers: BeamformerSet
    r_g_phase1: Optional[np.ndarray]
    r_g_phase2: Optional[np.ndarray]
    tau: float
    latency: float
    status: str
    trace: Tuple[TraceRow, ...] = ()
    flags: Tuple[str, ...] = ()
    relaxed_latency: Optional[float] = None
    message: str = ""

    def __post_init__(self):
        if self.status not in SCHEME_STATUSES:
            raise ValueError(f"unknown status '{self.status}'")

    @property
    def objectives(self) -> List[float]:
        return [row.objective for row in self.trace]

    def to_dict(self) -> Dict[str, object]:
        """JSON-friendly summary (complex beams as [re, im] pairs)."""

        def as_list(value):
            if value is None:
                return None
            arr = np.asarray(value)
            if np.iscomplexobj(arr):
                return np.stack((arr.real, arr.imag), axis=-1).tolist()
            return arr.tolist()

        beams = self.beamformers
        return {
            "scheme": self.scheme,
            "status": self.status,
            "flags": list(self.flags),
            "latency_s": self.latency,
            "tau_s": self.tau,
            "relaxed_latency_s": self.relaxed_latency,
            "r_g_phase1": as_list(self.r_g_phase1),
            "r_g_phase2": as_list(self.r_g_phase2),
            "iterations": len(self.trace),
            "message": self.message,
            "beamformers": {
                "w": as_list(beams.w),
                "wbar": as_list(beams.wbar),
                "omega": as_list(beams.omega),
            },
        }


def block_selector(i: int, K_R: int, N_t: int, on: int = 1) -> np.ndarray:
    """
    Selector P(x) for eRRH block i: P^T X P is block (i, i) of X when on=1, zero when on=0.
    """
    P = np.zeros((K_R * N_t, N_t))
    if on:
        P[i * N_t:(i + 1) * N_t, :] = np.eye(N_t)
    return P


def split_partial(wbar: np.ndarray, cache: CacheState, N_t: int) -> Tuple[np.ndarray, np.ndarray]:
    """Split merged beams into the cached part u and the fronthaul part v."""
    mask = np.repeat(cache.cached, N_t, axis=1).astype(bool)
    u = np.where(mask, wbar, 0)
    v = np.where(mask, 0, wbar)
    return u, v


def _gains(beams: np.ndarray, ch: ChannelSet) -> np.ndarray:
    """|h_k^H w_g|^2 for every user/group pair, shape (K_U, G)."""
    return np.abs(ch.stacked.conj() @ beams.T) ** 2


def _quantization_noise(omega: Optional[np.ndarray], ch: ChannelSet) -> np.ndarray:
    if omega is None:
        return np.zeros(ch.K_U)
    return np.real(np.einsum("kia,iab,kib->k", ch.h.conj(), omega, ch.h))


def _sinr_vector(beams: np.ndarray, groups: np.ndarray, ch: ChannelSet,
                 sigma2: Sequence[float], extra_noise: np.ndarray) -> np.ndarray:
    gains = _gains(beams, ch)
    users = np.arange(ch.K_U)
    signal = gains[users, groups]
    interference = gains.sum(axis=1) - signal
    return signal / (interference + extra_noise + np.asarray(sigma2, dtype=float))


def sinr_full(k: int, beams: BeamformerSet, ch: ChannelSet, sigma2: float) -> float:
    """
    SINR of user k when only cached beams w_g transmit.

    Returns:
        |h_k^H w_{g_k}|^2 / (sum_{g != g_k} |h_k^H w_g|^2 + sigma2)
    """
    gains = _gains(beams.w, ch)[k]
    g_k = beams.group_of_user[k]
    interference = gains.sum() - gains[g_k]
    return float(gains[g_k] / (interference + sigma2))


def sinr_partial(k: int, beams: BeamformerSet, ch: ChannelSet, sigma2: float) -> float:
    """SINR of user k under partial caching, with quantization noise h_k^H Omega h_k."""
    gains = _gains(beams.wbar, ch)[k]
    g_k = beams.group_of_user[k]
    interference = gains.sum() - gains[g_k]
    quant = _quantization_noise(beams.omega, ch)[k]
    return float(gains[g_k] / (interference + quant + sigma2))


def sinr_all(beams: BeamformerSet, ch: ChannelSet, sigma2: Sequence[float], phase: str) -> np.ndarray:
    """Vectorized SINR of every user; phase is 'full' (w) or 'partial' (wbar, Omega)."""
    if phase == "full":
        return _sinr_vector(beams.w, beams.group_of_user, ch, sigma2, np.zeros(ch.K_U))
    return _sinr_vector(beams.wbar, beams.group_of_user, ch, sigma2,
                        _quantization_noise(beams.omega, ch))


def achievable_rate(gamma: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """ln(1 + gamma) in nats/Hz/s."""
    return np.log1p(gamma)


def group_rates(beams: BeamformerSet, ch: ChannelSet, sigma2: Sequence[float],
                phase: str, G: int) -> np.ndarray:
    """Multicast rate of every group: the worst member's achievable rate."""
    rates = achievable_rate(sinr_all(beams, ch, sigma2, phase))
    out = np.empty(G)
    for g in range(G):
        members = beams.group_of_user == g
        out[g] = rates[members].min()
    return out


def fronthaul_rate(i: int, beams: BeamformerSet, cache: CacheState,
                   eig_floor: float = DEFAULT_EIG_FLOOR) -> float:
    """
    Fronthaul rate ln|A_i| - ln|Omega_i| of eRRH i, A_i = sum_g c̄ v v^H + Omega_i.

    Returns:
        math.inf when eRRH i has no uncached requested file.

    Raises:
        NonPositiveDefiniteOmega: Omega_i has an eigenvalue <= eig_floor
    """
    uncached = cache.uncached[:, i]
    if uncached.sum() == 0:
        return math.inf
    omega = beams.omega[i]
    if np.linalg.eigvalsh(omega).min() <= eig_floor:
        raise NonPositiveDefiniteOmega(f"Omega_{i} is not positive definite above {eig_floor}")
    A = omega.copy()
    for g in np.flatnonzero(uncached):
        v = beams.block(beams.wbar, g, i)
        A = A + np.outer(v, v.conj())
    _, logdet_a = np.linalg.slogdet(A)
    _, logdet_o = np.linalg.slogdet(omega)
    return float(logdet_a - logdet_o)


def delay_tau(S: float, beams: BeamformerSet, cache: CacheState, tau0: float,
              rate_floor: float = DEFAULT_RATE_FLOOR,
              eig_floor: float = DEFAULT_EIG_FLOOR) -> float:
    """
    Worst fetch delay tau0 + S / min_i g_i over eRRHs with fronthaul traffic.

    Returns 0 when every requested file is cached everywhere.
    """
    active = cache.fronthaul_errhs()
    if not active:
        return 0.0
    worst = min(fronthaul_rate(i, beams, cache, eig_floor) for i in active)
    if worst <= rate_floor:
        raise DegenerateFronthaul(f"worst fronthaul rate {worst:.3e} is at or below the floor")
    return tau0 + S / worst


def latency(scheme: str, S: float, r_g_phase1: Optional[Sequence[float]],
            r_g_phase2: Optional[Sequence[float]], tau: float,
            rate_floor: float = DEFAULT_RATE_FLOOR) -> float:
    """
    Delivery latency of a scheme: the worst group's completion time.

    FCBT uses S / r1; PCBT, TSWC and JCEO use S / r2 + tau; PCPT uses
    (S - tau r1) / r2 + tau, where groups finishing within tau contribute tau.
    """
    if scheme == "fcbt":
        r1 = np.asarray(r_g_phase1, dtype=float)
        if r1.min() < rate_floor:
            raise ZeroRate("a group has zero cached-delivery rate")
        return float(np.max(S / r1))
    r2 = np.asarray(r_g_phase2, dtype=float)
    if scheme in ("pcbt", "tswc", "jceo"):
        if r2.min() < rate_floor:
            raise ZeroRate("a group has zero delivery rate")
        return float(np.max(S / r2) + tau)
    if scheme != "pcpt":
        raise ValueError(f"unknown scheme tag '{scheme}'")
    r1 = np.zeros_like(r2) if r_g_phase1 is None else np.asarray(r_g_phase1, dtype=float)
    remaining = np.maximum(S - tau * r1, 0.0)
    worst = 0.0
    for rest, rate in zip(remaining, r2):
        if rest <= rate_floor * S:
            continue
        if rate < rate_floor:
            raise ZeroRate("a group with data left after the fetch delay has zero rate")
        worst = max(worst, rest / rate)
    return float(worst + tau)


def power_per_errh(beams: np.ndarray, N_t: int, omega: Optional[np.ndarray] = None) -> np.ndarray:
    """Transmit power of each eRRH: sum_g ||w_{g,i}||^2 (+ tr Omega_i)."""
    G, n = beams.shape
    K_R = n // N_t
    power = (np.abs(beams) ** 2).reshape(G, K_R, N_t).sum(axis=(0, 2))
    if omega is not None:
        power = power + np.real(np.trace(omega, axis1=1, axis2=2))
    return power


def _draw_positions(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    r = radius * np.sqrt(rng.uniform(size=count))
    angle = 2 * np.pi * rng.uniform(size=count)
    return np.column_stack((r * np.cos(angle), r * np.sin(angle)))


def _request_weights(config: NetworkConfig) -> np.ndarray:
    if config.request_distribution == "uniform":
        return np.full(config.F, 1.0 / config.F)
    ranks = np.arange(1, config.F + 1, dtype=float)
    weights = ranks ** (-config.zipf_exponent)
    return weights / weights.sum()


def _draw_groups(config: NetworkConfig, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    weights = _request_weights(config)
    if config.group_assignment == "balanced":
        files = rng.choice(config.F, size=config.G, replace=False, p=weights)
        order = rng.permutation(config.K_U)
        groups = np.empty(config.K_U, dtype=int)
        groups[order] = np.arange(config.K_U) % config.G
        return files, groups

    for attempt in range(MAX_REDRAWS):
        requests = rng.choice(config.F, size=config.K_U, p=weights)
        files, groups = np.unique(requests, return_inverse=True)
        if config.group_assignment == "free" or len(files) == config.G:
            if attempt:
                logger.debug(f"Group count matched after {attempt + 1} request draws")
            return files, groups
    raise ConfigError(
        f"could not draw exactly G={config.G} distinct requests from F={config.F} "
        f"files for K_U={config.K_U} users",
        key="G",
    )


def generate_instance(config: NetworkConfig, seed: int) -> Tuple[ChannelSet, CacheState]:
    """
    Draw geometry, channels, requests and caches for one trial.

    Independent random streams are spawned from the seed for the channel draw,
    the requests and the caches, so changing only the caching proportion keeps
    positions, channels and requests identical.

    Args:
        config: Validated network configuration
        seed: Non-negative integer seed

    Returns:
        (ChannelSet, CacheState)
    """
    geometry_seq, request_seq, cache_seq = np.random.SeedSequence(seed).spawn(3)
    geo = np.random.default_rng(geometry_seq)

    errh_pos = _draw_positions(geo, config.K_R, config.cell_radius)
    user_pos = _draw_positions(geo, config.K_U, config.cell_radius)
    distance = np.linalg.norm(user_pos[:, None, :] - errh_pos[None, :, :], axis=2)
    path_gain = 1.0 / (1.0 + (distance / config.d0) ** config.alpha)
    fading = (geo.standard_normal((config.K_U, config.K_R, config.N_t))
              + 1j * geo.standard_normal((config.K_U, config.K_R, config.N_t))) / np.sqrt(2)
    h = np.sqrt(path_gain)[:, :, None] * fading

    files, groups = _draw_groups(config, np.random.default_rng(request_seq))

    cache_rng = np.random.default_rng(cache_seq)
    c = np.zeros((config.F, config.K_R), dtype=int)
    for i in range(config.K_R):
        stored = cache_rng.choice(config.F, size=config.files_per_cache(i), replace=False)
        c[stored, i] = 1

    channels = ChannelSet(h=h, errh_positions=errh_pos, user_positions=user_pos, path_gain=path_gain)
    cache = CacheState(c=c, f_g=files, group_of_user=groups)
    cache.check_capacity(config)
    return channels, cache


def build_instance(config: NetworkConfig, seed: int) -> Instance:
    """generate_instance wrapped into an Instance bundle."""
    channels, cache = generate_instance(config, seed)
    return Instance(config=config, channels=channels, cache=cache, seed=seed)


def summarize_instance(instance: Instance) -> Dict[str, object]:
    """Small JSON-friendly description used in logs and solution summaries."""
    cache = instance.cache
    return {
        "K_R": instance.config.K_R,
        "K_U": instance.config.K_U,
        "N_t": instance.config.N_t,
        "G": cache.G,
        "requested_files": cache.f_g.tolist(),
        "cached_files_per_errh": cache.c.sum(axis=0).tolist(),
        "fronthaul_errhs": cache.fronthaul_errhs(),
    }
