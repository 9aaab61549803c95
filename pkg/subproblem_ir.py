#!/usr/bin/env python3
"""
subproblem_ir.py - Canonical convex subproblems for the SCA / penalty loops.

Every inner iteration of the FCBT, PCBT and PCPT schemes solves a convex problem
whose objective and constraints are built from a small family of atoms. This
module describes those problems in a purely real form that the barrier solver
can consume, and contains the tangent surrogates and the builders.

Features:
- Variable blocks: positive scalars, real vectors, Hermitian PSD matrices
- Affine scalar and affine matrix expressions over the real variable vector
- Convex atoms: affine, convex quadratic, -ln(affine), -ln det(affine matrix),
  reciprocal S/theta, squared hinge slack
- Tangent surrogates phi (log-det / log) and phi_bar (quadratic-over-linear)
- Complex-to-real embedding used for every complex quantity
- Builders for the FCBT, PCBT, PCPT and max-min-rate subproblems
- Human-readable dump of any subproblem

Dependencies:
    - numpy: pip install numpy
    - scipy: pip install scipy
"""

import math
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg

from errors import InfeasibleExpansionPoint, NonHermitianInput, SingularExpansionPoint
from network_model import Instance

logger = logging.getLogger(__name__)

SCALAR = "scalar"
REAL_VECTOR = "real-vector"
HERMITIAN = "hermitian-psd"

# Atom kinds
AFFINE = "Affine"
CONVEX_QUADRATIC = "ConvexQuadratic"
NEG_LOG_SCALAR = "NegLogScalar"
NEG_LOG_DET = "NegLogDet"
SUM_NEG_LOG = "SumNegLog"

DEFAULT_FLOOR = 1e-9
DEFAULT_EIG_FLOOR = 1e-10
DEFAULT_START_MARGIN = 1e-6
DEFAULT_SWAP_TOL = 1e-7


# --------------------------------------------------------------------------
# Complex / Hermitian plumbing
# --------------------------------------------------------------------------

def realify_operator(M: np.ndarray) -> np.ndarray:
    """[[Re M, -Im M], [Im M, Re M]] for a matrix or a stack of matrices."""
    M = np.asarray(M)
    re, im = M.real, M.imag
    top = np.concatenate((re, -im), axis=-1)
    bottom = np.concatenate((im, re), axis=-1)
    return np.concatenate((top, bottom), axis=-2)


def realify(M: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """
    Real symmetric embedding of a complex Hermitian matrix.

    ln det realify(M) = 2 ln det M and every eigenvalue of M appears twice.

    Raises:
        NonHermitianInput: M differs from M^H by more than tol
    """
    M = np.atleast_2d(np.asarray(M, dtype=complex))
    if M.shape[0] != M.shape[1] or not np.allclose(M, M.conj().T, atol=tol, rtol=0):
        raise NonHermitianInput(f"matrix of shape {M.shape} is not Hermitian")
    return realify_operator(M)


def hermitian_basis(N: int) -> np.ndarray:
    """
    Basis E_j of N x N Hermitian matrices, shape (N*N, N, N).

    Order: diagonal entries, then the real parts of the strict upper triangle,
    then its imaginary parts, so that X = sum_j x_j E_j.
    """
    basis = np.zeros((N * N, N, N), dtype=complex)
    for p in range(N):
        basis[p, p, p] = 1.0
    upper = [(p, q) for p in range(N) for q in range(p + 1, N)]
    offset = N
    for j, (p, q) in enumerate(upper):
        basis[offset + j, p, q] = 1.0
        basis[offset + j, q, p] = 1.0
    offset += len(upper)
    for j, (p, q) in enumerate(upper):
        basis[offset + j, p, q] = 1j
        basis[offset + j, q, p] = -1j
    return basis


def hermitian_to_params(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=complex)
    N = X.shape[0]
    rows, cols = np.triu_indices(N, k=1)
    return np.concatenate((np.real(np.diag(X)), X[rows, cols].real, X[rows, cols].imag))


def hermitian_from_params(x: np.ndarray, N: int) -> np.ndarray:
    rows, cols = np.triu_indices(N, k=1)
    m = len(rows)
    X = np.zeros((N, N), dtype=complex)
    X[np.arange(N), np.arange(N)] = x[:N]
    upper = x[N:N + m] + 1j * x[N + m:N + 2 * m]
    X[rows, cols] = upper
    X[cols, rows] = upper.conj()
    return X


def _logdet_pd(R: np.ndarray) -> float:
    factor, _ = scipy.linalg.cho_factor(R, lower=True)
    return 2.0 * float(np.sum(np.log(np.diag(factor))))


def _half_logdet(factor: Tuple[np.ndarray, bool]) -> float:
    """ln det of the complex matrix behind a realified Cholesky factor."""
    return float(np.sum(np.log(np.diag(factor[0]))))


def _is_pd(R: np.ndarray) -> bool:
    try:
        scipy.linalg.cho_factor(R, lower=True)
    except (np.linalg.LinAlgError, ValueError):
        return False
    return bool(np.all(np.isfinite(R)))


# --------------------------------------------------------------------------
# Expressions
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class AffineExpr:
    """coef . x[idx] + const over the real variable vector."""

    idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    coef: np.ndarray = field(default_factory=lambda: np.zeros(0))
    const: float = 0.0

    @staticmethod
    def constant(value: float) -> "AffineExpr":
        return AffineExpr(const=float(value))

    @staticmethod
    def variable(index: int, weight: float = 1.0) -> "AffineExpr":
        return AffineExpr(np.array([index]), np.array([float(weight)]))

    def value(self, x: np.ndarray) -> float:
        return float(self.coef @ x[self.idx]) + self.const

    def scaled(self, factor: float) -> "AffineExpr":
        return AffineExpr(self.idx, self.coef * factor, self.const * factor)

    def __add__(self, other) -> "AffineExpr":
        if isinstance(other, AffineExpr):
            return AffineExpr(np.concatenate((self.idx, other.idx)),
                              np.concatenate((self.coef, other.coef)),
                              self.const + other.const)
        return AffineExpr(self.idx, self.coef, self.const + float(other))

    __radd__ = __add__

    def __neg__(self) -> "AffineExpr":
        return self.scaled(-1.0)

    def __sub__(self, other) -> "AffineExpr":
        return self + (-other)

    def __rsub__(self, other) -> "AffineExpr":
        return (-self) + other

    def __mul__(self, factor: float) -> "AffineExpr":
        return self.scaled(float(factor))

    __rmul__ = __mul__

    def describe(self) -> str:
        terms = " ".join(f"{c:+.6g}*x[{i}]" for i, c in zip(self.idx, self.coef))
        return f"{terms} {self.const:+.6g}".strip()


@dataclass(frozen=True)
class AffineMatrix:
    """
    Realified Hermitian matrix R(x) = const + sum_j x[idx_j] mats_j.

    dim is the complex dimension; R is 2*dim x 2*dim.
    """

    idx: np.ndarray
    mats: np.ndarray
    const: np.ndarray

    @property
    def dim(self) -> int:
        return self.const.shape[0] // 2

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if len(self.idx) == 0:
            return self.const.copy()
        return self.const + np.tensordot(x[self.idx], self.mats, axes=1)

    def direction(self, dx: np.ndarray) -> np.ndarray:
        if len(self.idx) == 0:
            return np.zeros_like(self.const)
        return np.tensordot(dx[self.idx], self.mats, axes=1)

    def __add__(self, other: "AffineMatrix") -> "AffineMatrix":
        return AffineMatrix(np.concatenate((self.idx, other.idx)),
                            np.concatenate((self.mats, other.mats)),
                            self.const + other.const)

    @staticmethod
    def constant(M: np.ndarray) -> "AffineMatrix":
        R = realify(M)
        return AffineMatrix(np.zeros(0, dtype=int), np.zeros((0,) + R.shape), R)


@dataclass(frozen=True)
class QuadraticTerm:
    """||L x[idx]||^2."""

    idx: np.ndarray
    L: np.ndarray

    @cached_property
    def gram(self) -> np.ndarray:
        return 2.0 * self.L.T @ self.L

    def value(self, x: np.ndarray) -> float:
        y = self.L @ x[self.idx]
        return float(y @ y)


@dataclass(frozen=True)
class ReciprocalTerm:
    """weight / x[index], convex for x > 0."""

    index: int
    weight: float


def _scatter(vec: np.ndarray, idx: np.ndarray, values: np.ndarray) -> None:
    np.add.at(vec, idx, values)


def _scatter_block(H: np.ndarray, idx: np.ndarray, block: np.ndarray) -> None:
    np.add.at(H, (idx[:, None], idx[None, :]), block)


@dataclass(frozen=True)
class ConvexFunction:
    """
    affine + sum ||L x||^2 + sum w/x_j + sum -ln(affine) + sum -ln det(matrix).
    """

    affine: AffineExpr = field(default_factory=AffineExpr)
    quadratics: Tuple[QuadraticTerm, ...] = ()
    reciprocals: Tuple[ReciprocalTerm, ...] = ()
    neg_logs: Tuple[AffineExpr, ...] = ()
    neg_logdets: Tuple[AffineMatrix, ...] = ()

    def in_domain(self, x: np.ndarray) -> bool:
        if any(x[r.index] <= 0 for r in self.reciprocals):
            return False
        if any(arg.value(x) <= 0 for arg in self.neg_logs):
            return False
        return all(_is_pd(M.evaluate(x)) for M in self.neg_logdets)

    def value(self, x: np.ndarray) -> float:
        """Function value; +inf outside the domain."""
        return self.value_and_scale(x)[0]

    def value_and_scale(self, x: np.ndarray) -> Tuple[float, float]:
        """
        Function value and the summed magnitude of its terms, the scale of the
        round-off in the value. Both are +inf outside the domain.

        The terms are accumulated in the same order as derivatives(), so the
        two give bit-identical values at the same point.
        """
        if not self.in_domain(x):
            return math.inf, math.inf
        total = self.affine.value(x)
        scale = abs(self.affine.const) + float(np.abs(self.affine.coef * x[self.affine.idx]).sum())
        for q in self.quadratics:
            y = q.L @ x[q.idx]
            term = float(y @ y)
            total += term
            scale += term
        for r in self.reciprocals:
            term = r.weight / x[r.index]
            total += term
            scale += abs(term)
        for arg in self.neg_logs:
            term = math.log(arg.value(x))
            total -= term
            scale += abs(term)
        for M in self.neg_logdets:
            term = _half_logdet(scipy.linalg.cho_factor(M.evaluate(x), lower=True))
            total -= term
            scale += abs(term)
        return total, scale

    def derivatives(self, x: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
        """Value, gradient and Hessian at a point inside the domain."""
        n = len(x)
        grad = np.zeros(n)
        hess = np.zeros((n, n))
        value = self.affine.value(x)
        _scatter(grad, self.affine.idx, self.affine.coef)

        for q in self.quadratics:
            y = q.L @ x[q.idx]
            value += float(y @ y)
            _scatter(grad, q.idx, 2.0 * q.L.T @ y)
            _scatter_block(hess, q.idx, q.gram)

        for r in self.reciprocals:
            xi = x[r.index]
            value += r.weight / xi
            grad[r.index] -= r.weight / xi ** 2
            hess[r.index, r.index] += 2.0 * r.weight / xi ** 3

        for arg in self.neg_logs:
            a = arg.value(x)
            value -= math.log(a)
            _scatter(grad, arg.idx, -arg.coef / a)
            _scatter_block(hess, arg.idx, np.outer(arg.coef, arg.coef) / a ** 2)

        for M in self.neg_logdets:
            R = M.evaluate(x)
            factor = scipy.linalg.cho_factor(R, lower=True)
            value -= _half_logdet(factor)
            if len(M.idx) == 0:
                continue
            Rinv = scipy.linalg.cho_solve(factor, np.eye(R.shape[0]))
            B = np.matmul(Rinv[None, :, :], M.mats)
            p, m = B.shape[0], B.shape[1]
            _scatter(grad, M.idx, -0.5 * np.trace(B, axis1=1, axis2=2))
            flat = B.reshape(p, m * m)
            flat_t = B.transpose(0, 2, 1).reshape(p, m * m)
            _scatter_block(hess, M.idx, 0.5 * flat @ flat_t.T)

        return value, grad, hess


@dataclass(frozen=True)
class ConstraintAtom:
    """function(x) <= 0 with a kind tag and a label naming its origin."""

    kind: str
    label: str
    function: ConvexFunction


@dataclass(frozen=True)
class VariableBlock:
    name: str
    kind: str
    dimension: int
    offset: int
    size: int
    lower: Optional[float] = None
    basis: Optional[np.ndarray] = None

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.offset, self.offset + self.size)

    @property
    def index(self) -> int:
        return self.offset


@dataclass(frozen=True)
class SubproblemIR:
    """
    A convex subproblem: minimize objective(x) s.t. atoms <= 0, lower bounds and
    PSD blocks, from a strictly feasible start point.
    """

    name: str
    blocks: Tuple[VariableBlock, ...]
    objective: ConvexFunction
    constraints: Tuple[ConstraintAtom, ...]
    start: np.ndarray
    psd_barriers: Tuple[AffineMatrix, ...] = ()
    notes: Tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return len(self.start)

    def block(self, name: str) -> VariableBlock:
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)

    def has_block(self, name: str) -> bool:
        return any(b.name == name for b in self.blocks)

    @cached_property
    def lower_bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        idx = [b.offset for b in self.blocks if b.kind == SCALAR and b.lower is not None]
        low = [b.lower for b in self.blocks if b.kind == SCALAR and b.lower is not None]
        return np.array(idx, dtype=int), np.array(low, dtype=float)

    @property
    def barrier_count(self) -> int:
        """Barrier parameter: one per atom and bound, N per N x N PSD block."""
        return (len(self.constraints) + len(self.lower_bounds[0])
                + sum(M.dim for M in self.psd_barriers))

    def unpack(self, x: np.ndarray) -> Dict[str, Union[float, np.ndarray]]:
        values: Dict[str, Union[float, np.ndarray]] = {}
        for b in self.blocks:
            if b.kind == SCALAR:
                values[b.name] = float(x[b.offset])
            elif b.kind == REAL_VECTOR:
                values[b.name] = x[b.offset:b.offset + b.size].copy()
            else:
                values[b.name] = hermitian_from_params(x[b.offset:b.offset + b.size], b.dimension)
        return values

    def violations(self, x: np.ndarray) -> List[str]:
        """Labels of every bound, PSD block or atom not strictly satisfied at x."""
        failed = []
        idx, low = self.lower_bounds
        for j, lb in zip(idx, low):
            if not x[j] > lb:
                failed.append(f"lower bound x[{j}] > {lb:g}")
        for b, M in zip([b for b in self.blocks if b.kind == HERMITIAN], self.psd_barriers):
            if not _is_pd(M.evaluate(x)):
                failed.append(f"psd {b.name}")
        for atom in self.constraints:
            if not atom.function.value(x) < 0:
                failed.append(atom.label)
        return failed

    def is_strictly_feasible(self, x: np.ndarray) -> bool:
        return not self.violations(x)

    def dump(self, x: Optional[np.ndarray] = None) -> str:
        """Text rendering of variables, atoms and the start (or given) point."""
        x = self.start if x is None else x
        lines = [f"subproblem {self.name}", f"variables {self.n}"]
        for b in self.blocks:
            lower = "" if b.lower is None else f" lower={b.lower:g}"
            lines.append(f"  {b.name} {b.kind} dim={b.dimension} offset={b.offset} size={b.size}{lower}")
        f = self.objective
        lines.append(
            f"objective affine[{f.affine.describe()}] quadratics={len(f.quadratics)} "
            f"reciprocals={len(f.reciprocals)} value={f.value(x):.10g}"
        )
        lines.append(f"constraints {len(self.constraints)}")
        for atom in self.constraints:
            fn = atom.function
            lines.append(
                f"  [{atom.kind}] {atom.label}: terms={len(fn.affine.idx)} quad={len(fn.quadratics)} "
                f"recip={len(fn.reciprocals)} logs={len(fn.neg_logs)} logdets={len(fn.neg_logdets)} "
                f"value={fn.value(x):.10g}"
            )
        for note in self.notes:
            lines.append(f"note {note}")
        lines.append("point")
        for name, value in self.unpack(x).items():
            if isinstance(value, float):
                lines.append(f"  {name} = {value:.10g}")
            else:
                flat = np.round(np.asarray(value).ravel(), 10)
                lines.append(f"  {name} = {np.array2string(flat, precision=8, max_line_width=200)}")
        return "\n".join(lines) + "\n"


class IRBuilder:
    """Incremental construction of a SubproblemIR and its start point."""

    def __init__(self, name: str):
        self.name = name
        self.blocks: List[VariableBlock] = []
        self.constraints: List[ConstraintAtom] = []
        self.notes: List[str] = []
        self._size = 0
        self._start: Dict[str, np.ndarray] = {}

    def _add(self, block: VariableBlock) -> VariableBlock:
        self.blocks.append(block)
        self._size += block.size
        return block

    def scalar(self, name: str, lower: Optional[float] = DEFAULT_FLOOR) -> VariableBlock:
        return self._add(VariableBlock(name, SCALAR, 1, self._size, 1, lower))

    def vector(self, name: str, size: int) -> VariableBlock:
        return self._add(VariableBlock(name, REAL_VECTOR, size, self._size, size))

    def hermitian(self, name: str, N: int) -> VariableBlock:
        return self._add(VariableBlock(name, HERMITIAN, N, self._size, N * N, basis=hermitian_basis(N)))

    def constrain(self, kind: str, label: str, function: ConvexFunction) -> None:
        self.constraints.append(ConstraintAtom(kind, label, function))

    def set_start(self, block: VariableBlock, value) -> None:
        if block.kind == HERMITIAN:
            self._start[block.name] = hermitian_to_params(value)
        else:
            self._start[block.name] = np.atleast_1d(np.asarray(value, dtype=float))

    def point(self) -> np.ndarray:
        """Current start vector; unset blocks are zero."""
        x = np.zeros(self._size)
        for b in self.blocks:
            if b.name in self._start:
                x[b.offset:b.offset + b.size] = self._start[b.name]
        return x

    def finish(self, objective: ConvexFunction) -> SubproblemIR:
        missing = [b.name for b in self.blocks if b.name not in self._start]
        if missing:
            raise ValueError(f"start point missing for blocks {missing}")
        psd = tuple(block_matrix(b) for b in self.blocks if b.kind == HERMITIAN)
        ir = SubproblemIR(self.name, tuple(self.blocks), objective, tuple(self.constraints),
                          self.point(), psd, tuple(self.notes))
        failed = ir.violations(ir.start)
        if failed:
            raise InfeasibleExpansionPoint(
                f"{self.name}: start point violates {len(failed)} constraint(s): {', '.join(failed[:5])}"
            )
        return ir


# --------------------------------------------------------------------------
# Expression helpers over variable blocks
# --------------------------------------------------------------------------

def var(block: VariableBlock, weight: float = 1.0) -> AffineExpr:
    return AffineExpr.variable(block.offset, weight)


def trace_functional(block: VariableBlock, H: np.ndarray, rows: Optional[np.ndarray] = None) -> AffineExpr:
    """tr(H X) for Hermitian block X, or tr(H X[rows, rows]) when rows is given."""
    basis = block.basis
    if rows is not None:
        basis = basis[:, rows][:, :, rows]
    coef = np.real(np.einsum("ab,jba->j", H, basis))
    keep = np.flatnonzero(np.abs(coef) > 0)
    return AffineExpr(block.offset + keep, coef[keep])


def block_matrix(block: VariableBlock, rows: Optional[np.ndarray] = None) -> AffineMatrix:
    """The Hermitian variable (or its principal submatrix on rows) as an AffineMatrix."""
    basis = block.basis
    if rows is not None:
        basis = basis[:, rows][:, :, rows]
    keep = np.flatnonzero(np.abs(basis).reshape(len(basis), -1).sum(axis=1) > 0)
    mats = realify_operator(basis[keep])
    m = 2 * basis.shape[1]
    return AffineMatrix(block.offset + keep, mats, np.zeros((m, m)))


def phi(A, B, eig_floor: float = DEFAULT_EIG_FLOOR):
    """
    Tangent of ln|.| at B: ln|B| + tr(B^-1 (A - B)), an upper bound on ln|A|.

    A may be a number, a Hermitian matrix, an AffineExpr (scalar case) or an
    AffineMatrix; affine inputs give an AffineExpr back.

    Raises:
        SingularExpansionPoint: B is not positive definite above eig_floor
    """
    if isinstance(A, AffineExpr) or np.isscalar(A) and np.isscalar(B):
        B = float(np.real(B))
        if B <= eig_floor:
            raise SingularExpansionPoint(f"tangent point {B:.3e} is not positive")
        if isinstance(A, AffineExpr):
            return A.scaled(1.0 / B) + (math.log(B) - 1.0)
        return math.log(B) + (float(A) - B) / B

    B = np.atleast_2d(np.asarray(B, dtype=complex))
    if np.linalg.eigvalsh(B).min() <= eig_floor:
        raise SingularExpansionPoint("tangent matrix is not positive definite")
    RB = realify(B)
    RB_inv = np.linalg.inv(RB)
    logdet_b = 0.5 * _logdet_pd(RB)
    N = B.shape[0]
    if isinstance(A, AffineMatrix):
        coef = 0.5 * np.einsum("ab,jba->j", RB_inv, A.mats)
        const = logdet_b + 0.5 * float(np.trace(RB_inv @ A.const)) - N
        return AffineExpr(A.idx.copy(), coef, const)
    A = np.atleast_2d(np.asarray(A, dtype=complex))
    return logdet_b + float(np.real(np.trace(np.linalg.solve(B, A)))) - N


def phi_bar(w: np.ndarray, chi: float, w_t: np.ndarray, chi_t: float, h: np.ndarray) -> float:
    """
    Lower bound of |h^H w|^2 / chi, tight at (w_t, chi_t):
    2 Re(w_t^H h h^H w) / chi_t - (|h^H w_t| / chi_t)^2 chi.
    """
    if chi_t <= 0:
        raise SingularExpansionPoint("chi_t must be positive")
    z = np.vdot(h, w)
    z_t = np.vdot(h, w_t)
    return float(2.0 * np.real(np.conj(z_t) * z) / chi_t - (abs(z_t) / chi_t) ** 2 * chi)


def _channel_rows(h: np.ndarray, active: np.ndarray) -> np.ndarray:
    """Real 2 x 2m map from [Re w; Im w] to [Re h^H w; Im h^H w]."""
    return realify_operator(h[active].conj()[None, :])


def active_rows(cached_row: np.ndarray, N_t: int) -> np.ndarray:
    """Stacked entries of the eRRH blocks flagged in cached_row."""
    return np.flatnonzero(np.repeat(np.asarray(cached_row, dtype=bool), N_t))


def beams_from_vector(vec: np.ndarray, active: np.ndarray, n: int) -> np.ndarray:
    m = len(active)
    beam = np.zeros(n, dtype=complex)
    beam[active] = vec[:m] + 1j * vec[m:]
    return beam


def _min_rate_start(ln_ratio: float, margin: float) -> float:
    return (1.0 - margin) * ln_ratio


# --------------------------------------------------------------------------
# FCBT
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class FcbtExpansion:
    """Expansion point of the full-caching subproblem: beams (G, n) and chi (K_U,)."""

    w: np.ndarray
    chi: np.ndarray


def fcbt_chi(instance: Instance, w: np.ndarray) -> np.ndarray:
    """Interference-plus-noise of every user at beams w."""
    gains = np.abs(instance.channels.stacked.conj() @ w.T) ** 2
    users = np.arange(instance.config.K_U)
    own = gains[users, instance.cache.group_of_user]
    return gains.sum(axis=1) - own + np.asarray(instance.config.sigma2)


def build_fcbt_subproblem(instance: Instance, expansion: FcbtExpansion,
                          floor: float = DEFAULT_FLOOR,
                          start_margin: float = DEFAULT_START_MARGIN) -> SubproblemIR:
    """
    Convex full-caching subproblem: min eta over eta, w_g, r_g, gamma_k, chi_k.

    Beam entries on blocks whose eRRH does not cache the group's file are not
    variables at all.

    Raises:
        InfeasibleExpansionPoint: no strictly feasible start exists at the expansion point
    """
    config, cache, ch = instance.config, instance.cache, instance.channels
    G, K_U, N_t, n = cache.G, config.K_U, config.N_t, config.stacked_dim
    m = start_margin
    b = IRBuilder("fcbt")

    eta = b.scalar("eta", floor)
    active = [active_rows(cache.cached[g], N_t) for g in range(G)]
    for g in range(G):
        if len(active[g]) == 0:
            raise InfeasibleExpansionPoint(f"group {g} has no eRRH caching its file")
    w = [b.vector(f"w[{g}]", 2 * len(active[g])) for g in range(G)]
    r = [b.scalar(f"r1[{g}]", floor) for g in range(G)]
    gamma = [b.scalar(f"gamma[{k}]", None) for k in range(K_U)]
    chi = [b.scalar(f"chi[{k}]", floor) for k in range(K_U)]

    rows = [[_channel_rows(ch.stacked[k], active[g]) for g in range(G)] for k in range(K_U)]

    for k in range(K_U):
        g_k = cache.group_of_user[k]
        b.constrain(NEG_LOG_SCALAR, f"rate[{k}]", ConvexFunction(
            affine=var(r[g_k]), neg_logs=(var(gamma[k]) + 1.0,)))

        quads = tuple(QuadraticTerm(w[g].indices, rows[k][g]) for g in range(G) if g != g_k)
        b.constrain(CONVEX_QUADRATIC, f"interference[{k}]", ConvexFunction(
            affine=config.sigma2[k] - var(chi[k]), quadratics=quads))

        w_t = expansion.w[g_k]
        z_t = np.vdot(ch.stacked[k], w_t)
        chi_t = float(expansion.chi[k])
        L = rows[k][g_k]
        lin = (2.0 / chi_t) * (z_t.real * L[0] + z_t.imag * L[1])
        phi_bar_affine = AffineExpr(w[g_k].indices, lin) + var(chi[k], -abs(z_t) ** 2 / chi_t ** 2)
        b.constrain(AFFINE, f"sinr_bound[{k}]", ConvexFunction(affine=var(gamma[k]) - phi_bar_affine))

    for i in range(config.K_R):
        quads = []
        for g in range(G):
            if not cache.cached[g, i]:
                continue
            local = np.flatnonzero((active[g] >= i * N_t) & (active[g] < (i + 1) * N_t))
            cols = np.concatenate((local, local + len(active[g])))
            quads.append(QuadraticTerm(w[g].indices[cols], np.eye(len(cols))))
        if quads:
            b.constrain(CONVEX_QUADRATIC, f"power[{i}]", ConvexFunction(
                affine=AffineExpr.constant(-config.P[i]), quadratics=tuple(quads)))

    for g in range(G):
        b.constrain(SUM_NEG_LOG, f"latency[{g}]", ConvexFunction(
            affine=AffineExpr.constant(math.log(config.S)), neg_logs=(var(eta), var(r[g]))))

    # Start point: expansion beams with tight-but-strict auxiliaries.
    chi_start = np.asarray(expansion.chi, dtype=float) * (1.0 + m)
    gamma_start = np.empty(K_U)
    for k in range(K_U):
        g_k = cache.group_of_user[k]
        bound = phi_bar(expansion.w[g_k], chi_start[k], expansion.w[g_k], expansion.chi[k], ch.stacked[k])
        gamma_start[k] = bound - m * max(abs(bound), 1e-12)
    r_start = np.empty(G)
    for g in range(G):
        members = cache.users_in_group(g)
        r_start[g] = _min_rate_start(float(np.log1p(gamma_start[members]).min()), m)
        if r_start[g] <= floor:
            raise InfeasibleExpansionPoint(f"group {g} has no positive rate at the expansion point")

    b.set_start(eta, float(np.max(config.S / r_start)) * (1.0 + m))
    for g in range(G):
        beam = expansion.w[g][active[g]]
        b.set_start(w[g], np.concatenate((beam.real, beam.imag)))
        b.set_start(r[g], r_start[g])
    for k in range(K_U):
        b.set_start(gamma[k], gamma_start[k])
        b.set_start(chi[k], chi_start[k])

    return b.finish(ConvexFunction(affine=var(eta)))


# --------------------------------------------------------------------------
# Partial caching (PCBT, PCPT, max-min rate)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PartialExpansion:
    """
    Expansion point of the partial-caching subproblems.

    wbar: (G, n, n) phase-II (bulk) covariance matrices
    omega: (K_R, N_t, N_t) quantization covariances
    theta: delay surrogate tangent point (PCPT) or start hint (PCBT)
    w: (G, n, n) phase-I covariances, embedded at full size (PCPT)
    r1, psi, kappa: per-group tangent points (PCPT)
    """

    wbar: np.ndarray
    omega: np.ndarray
    theta: Optional[float] = None
    w: Optional[np.ndarray] = None
    r1: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    kappa: Optional[np.ndarray] = None


def _block_rows(i: int, N_t: int) -> np.ndarray:
    return np.arange(i * N_t, (i + 1) * N_t)


def fronthaul_matrix_value(instance: Instance, wbar: np.ndarray, omega: np.ndarray, i: int) -> np.ndarray:
    """A_i = sum_g c̄ block_ii(Wbar_g) + Omega_i at numeric matrices."""
    rows = _block_rows(i, instance.config.N_t)
    A = np.array(omega[i], dtype=complex)
    for g in np.flatnonzero(instance.cache.uncached[:, i]):
        A = A + wbar[g][np.ix_(rows, rows)]
    return A


def _check_pd(M: np.ndarray, what: str, eig_floor: float) -> None:
    if np.linalg.eigvalsh(M).min() <= eig_floor:
        raise InfeasibleExpansionPoint(f"{what} is not positive definite at the expansion point")


class _PartialLayout:
    """Shared variables and constraints of the PCBT / PCPT / max-min subproblems."""

    def __init__(self, builder: IRBuilder, instance: Instance, expansion: PartialExpansion,
                 floor: float, eig_floor: float):
        config, cache = instance.config, instance.cache
        self.b = builder
        self.instance = instance
        self.expansion = expansion
        self.floor = floor
        self.eig_floor = eig_floor
        self.G, self.K_U, self.N_t, self.n = cache.G, config.K_U, config.N_t, config.stacked_dim
        self.fronthaul = cache.fronthaul_errhs()

        for g in range(self.G):
            _check_pd(expansion.wbar[g], f"Wbar[{g}]", 0.0)
        for i in self.fronthaul:
            _check_pd(expansion.omega[i], f"Omega[{i}]", eig_floor)

        self.eta = builder.scalar("eta", floor)
        self.wbar = [builder.hermitian(f"Wbar[{g}]", self.n) for g in range(self.G)]
        self.omega = {i: builder.hermitian(f"Omega[{i}]", self.N_t) for i in self.fronthaul}
        self.r2 = [builder.scalar(f"r2[{g}]", floor) for g in range(self.G)]
        for g in range(self.G):
            builder.set_start(self.wbar[g], expansion.wbar[g])
        for i in self.fronthaul:
            builder.set_start(self.omega[i], expansion.omega[i])

        self.A = {i: self._fronthaul_matrix(i) for i in self.fronthaul}
        self.A_t = {i: fronthaul_matrix_value(instance, expansion.wbar, expansion.omega, i)
                    for i in self.fronthaul}
        self.omega_matrix = {i: block_matrix(self.omega[i]) for i in self.fronthaul}

    def _fronthaul_matrix(self, i: int) -> AffineMatrix:
        rows = _block_rows(i, self.N_t)
        A = block_matrix(self.omega[i])
        for g in np.flatnonzero(self.instance.cache.uncached[:, i]):
            A = A + block_matrix(self.wbar[g], rows)
        return A

    def bulk_sinr_terms(self, k: int) -> Tuple[AffineExpr, AffineExpr]:
        """(mu_k, chi_k): received power plus noise, and the part excluding the own group."""
        H = self.instance.channels.outer[k]
        g_k = self.instance.cache.group_of_user[k]
        noise = AffineExpr.constant(self.instance.config.sigma2[k])
        for i in self.fronthaul:
            rows = _block_rows(i, self.N_t)
            noise = noise + trace_functional(self.omega[i], H[np.ix_(rows, rows)])
        own = trace_functional(self.wbar[g_k], H)
        others = noise
        for g in range(self.G):
            if g != g_k:
                others = others + trace_functional(self.wbar[g], H)
        return own + others, others

    def add_bulk_constraints(self) -> np.ndarray:
        """Rate, power and fronthaul constraints; returns the start rates r2."""
        b, config, cache = self.b, self.instance.config, self.instance.cache
        x0 = b.point()
        log_ratio = np.empty(self.K_U)
        for k in range(self.K_U):
            mu, chi = self.bulk_sinr_terms(k)
            mu_t, chi_t = mu.value(x0), chi.value(x0)
            log_ratio[k] = math.log(mu_t) - math.log(chi_t)
            g_k = cache.group_of_user[k]
            b.constrain(NEG_LOG_SCALAR, f"rate2[{k}]", ConvexFunction(
                affine=var(self.r2[g_k]) + phi(chi, chi_t), neg_logs=(mu,)))

        for i in range(config.K_R):
            rows = _block_rows(i, self.N_t)
            select = np.zeros((self.n, self.n))
            select[rows, rows] = 1.0
            power = AffineExpr.constant(-config.P[i])
            for g in range(self.G):
                power = power + trace_functional(self.wbar[g], select)
            if i in self.omega:
                power = power + trace_functional(self.omega[i], np.eye(self.N_t))
            if power.value(x0) >= 0:
                raise InfeasibleExpansionPoint(f"eRRH {i} exceeds its power budget at the expansion point")
            b.constrain(AFFINE, f"power2[{i}]", ConvexFunction(affine=power))

        for i in self.fronthaul:
            b.constrain(NEG_LOG_DET, f"fronthaul[{i}]", ConvexFunction(
                affine=phi(self.A[i], self.A_t[i]) - config.C[i],
                neg_logdets=(self.omega_matrix[i],)))

        r2_start = np.empty(self.G)
        for g in range(self.G):
            members = cache.users_in_group(g)
            r2_start[g] = _min_rate_start(float(log_ratio[members].min()), DEFAULT_START_MARGIN)
            if r2_start[g] <= self.floor:
                raise InfeasibleExpansionPoint(f"group {g} has no positive bulk rate at the expansion point")
            b.set_start(self.r2[g], r2_start[g])
        return r2_start

    def fronthaul_rates_at_expansion(self) -> Dict[int, float]:
        rates = {}
        for i in self.fronthaul:
            _, logdet_a = np.linalg.slogdet(self.A_t[i])
            _, logdet_o = np.linalg.slogdet(self.expansion.omega[i])
            rates[i] = float(logdet_a - logdet_o)
        return rates

    def add_penalty(self, theta: VariableBlock, lam: float, rho: float, theta_start: float,
                    margin: float) -> List[VariableBlock]:
        """Squared-hinge slacks t_i >= S/theta + phi(Omega_i) - ln|A_i| + rho*lam, t_i >= 0."""
        b, S = self.b, self.instance.config.S
        slacks = []
        for i in self.fronthaul:
            t = b.scalar(f"t[{i}]", 0.0)
            b.constrain(NEG_LOG_DET, f"hinge[{i}]", ConvexFunction(
                affine=phi(self.omega_matrix[i], self.expansion.omega[i]) + rho * lam - var(t),
                reciprocals=(ReciprocalTerm(theta.offset, S),),
                neg_logdets=(self.A[i],)))
            rates = self.fronthaul_rates_at_expansion()
            e_start = S / theta_start - rates[i] + rho * lam
            b.set_start(t, max(e_start, 0.0) + margin * (1.0 + abs(e_start)))
            slacks.append(t)
        return slacks


def _penalized_objective(eta: VariableBlock, theta: Optional[VariableBlock],
                         slacks: Sequence[VariableBlock], rho: float) -> ConvexFunction:
    affine = var(eta)
    if theta is not None:
        affine = affine + var(theta)
    quads = ()
    if slacks:
        idx = np.array([t.offset for t in slacks])
        quads = (QuadraticTerm(idx, math.sqrt(1.0 / (2.0 * rho)) * np.eye(len(idx))),)
    return ConvexFunction(affine=affine, quadratics=quads)


def penalty_count(instance: Instance) -> int:
    """Number of eRRHs entering the penalty: those with an uncached requested file."""
    return len(instance.cache.fronthaul_errhs())


def build_pcbt_subproblem(instance: Instance, expansion: PartialExpansion, lam: float, rho: float,
                          floor: float = DEFAULT_FLOOR, eig_floor: float = DEFAULT_EIG_FLOOR,
                          start_margin: float = DEFAULT_START_MARGIN) -> SubproblemIR:
    """
    Convex bulk partial-caching subproblem:
    min eta + theta + (1/2rho) sum_i t_i^2 over eta, theta, Wbar_g, Omega_i, r2_g, t_i.

    eRRHs whose requested files are all cached carry no Omega, no fronthaul
    constraint and no penalty term.
    """
    config = instance.config
    b = IRBuilder("pcbt")
    layout = _PartialLayout(b, instance, expansion, floor, eig_floor)
    r2_start = layout.add_bulk_constraints()

    for g in range(layout.G):
        b.constrain(SUM_NEG_LOG, f"latency[{g}]", ConvexFunction(
            affine=AffineExpr.constant(math.log(config.S)), neg_logs=(var(layout.eta), var(layout.r2[g]))))
    b.set_start(layout.eta, float(np.max(config.S / r2_start)) * (1.0 + start_margin))

    theta, slacks = None, []
    if layout.fronthaul:
        rates = layout.fronthaul_rates_at_expansion()
        worst = min(rates.values())
        for i, rate in rates.items():
            if rate >= config.C[i]:
                raise InfeasibleExpansionPoint(f"eRRH {i} exceeds its fronthaul capacity at the expansion point")
        if worst <= floor:
            raise InfeasibleExpansionPoint("degenerate fronthaul rate at the expansion point")
        theta = b.scalar("theta", floor)
        theta_start = expansion.theta if expansion.theta and expansion.theta > floor else config.S / worst
        b.set_start(theta, theta_start)
        slacks = layout.add_penalty(theta, lam, rho, theta_start, start_margin)
    else:
        b.notes.append("no fronthaul-limited eRRH: penalty empty")

    return b.finish(_penalized_objective(layout.eta, theta, slacks, rho))


def build_jceo_subproblem(instance: Instance, expansion: PartialExpansion,
                          floor: float = DEFAULT_FLOOR, eig_floor: float = DEFAULT_EIG_FLOOR,
                          start_margin: float = DEFAULT_START_MARGIN) -> SubproblemIR:
    """Max-min bulk rate under the power and fronthaul constraints, without delay coupling."""
    config = instance.config
    b = IRBuilder("jceo")
    layout = _PartialLayout(b, instance, expansion, floor, eig_floor)
    r2_start = layout.add_bulk_constraints()
    for i, rate in layout.fronthaul_rates_at_expansion().items():
        if rate >= config.C[i]:
            raise InfeasibleExpansionPoint(f"eRRH {i} exceeds its fronthaul capacity at the expansion point")
    for g in range(layout.G):
        b.constrain(SUM_NEG_LOG, f"latency[{g}]", ConvexFunction(
            affine=AffineExpr.constant(math.log(config.S)), neg_logs=(var(layout.eta), var(layout.r2[g]))))
    b.set_start(layout.eta, float(np.max(config.S / r2_start)) * (1.0 + start_margin))
    return b.finish(ConvexFunction(affine=var(layout.eta)))


def swapped_groups(instance: Instance, expansion: PartialExpansion,
                   swap_tol: float = DEFAULT_SWAP_TOL) -> List[int]:
    """Cached groups whose file is fully delivered within the delay at the expansion point."""
    config, cache = instance.config, instance.cache
    swapped = []
    for g in range(cache.G):
        if cache.cached[g].sum() == 0:
            continue
        leftover = config.S - (config.tau0 + expansion.theta) * expansion.r1[g]
        if leftover <= swap_tol * config.S or expansion.kappa[g] <= DEFAULT_FLOOR:
            swapped.append(g)
    return swapped


def build_pcpt_subproblem(instance: Instance, expansion: PartialExpansion, lam: float, rho: float,
                          floor: float = DEFAULT_FLOOR, eig_floor: float = DEFAULT_EIG_FLOOR,
                          start_margin: float = DEFAULT_START_MARGIN,
                          swap_tol: float = DEFAULT_SWAP_TOL) -> SubproblemIR:
    """
    Convex pipelined partial-caching subproblem.

    Adds the phase-I covariances W_g (cached rows only), phase-I rates r1_g and
    the split variables psi_g, kappa_g. Groups with no cached block use the bulk
    latency constraint instead; groups already finishing within the delay drop
    the split constraints.
    """
    config, cache, ch = instance.config, instance.cache, instance.channels
    if expansion.theta is None:
        raise ValueError("the pipelined subproblem needs a theta tangent point")
    m = start_margin
    S, tau0 = config.S, config.tau0
    b = IRBuilder("pcpt")
    layout = _PartialLayout(b, instance, expansion, floor, eig_floor)
    G, K_U, N_t = layout.G, layout.K_U, layout.N_t

    cached_groups = [g for g in range(G) if cache.cached[g].sum() > 0]
    rows = {g: active_rows(cache.cached[g], N_t) for g in cached_groups}
    swapped = swapped_groups(instance, expansion, swap_tol) if cached_groups else []
    if swapped:
        b.notes.append(f"groups {swapped} deliver within the delay: split constraints dropped")
        logger.debug(f"Swap rule active for groups {swapped}")

    W = {}
    for g in cached_groups:
        W[g] = b.hermitian(f"W[{g}]", len(rows[g]))
        sub = expansion.w[g][np.ix_(rows[g], rows[g])]
        _check_pd(sub, f"W[{g}]", 0.0)
        b.set_start(W[g], sub)
    r1 = {g: b.scalar(f"r1[{g}]", floor) for g in cached_groups}
    theta = b.scalar("theta", floor)
    split = [g for g in cached_groups if g not in swapped]
    psi = {g: b.scalar(f"psi[{g}]", floor) for g in split}
    kappa = {g: b.scalar(f"kappa[{g}]", floor) for g in split}

    r2_start = layout.add_bulk_constraints()
    x0 = b.point()

    # Phase-I rates: only users of groups with cached blocks transmit in phase I.
    phase1_ratio = {g: math.inf for g in cached_groups}
    for k in range(K_U):
        g_k = cache.group_of_user[k]
        if g_k not in W:
            continue
        H = ch.outer[k]
        others = AffineExpr.constant(config.sigma2[k])
        for g in cached_groups:
            if g != g_k:
                others = others + trace_functional(W[g], H[np.ix_(rows[g], rows[g])])
        mu = others + trace_functional(W[g_k], H[np.ix_(rows[g_k], rows[g_k])])
        mu_t, chi_t = mu.value(x0), others.value(x0)
        phase1_ratio[g_k] = min(phase1_ratio[g_k], math.log(mu_t) - math.log(chi_t))
        b.constrain(NEG_LOG_SCALAR, f"rate1[{k}]", ConvexFunction(
            affine=var(r1[g_k]) + phi(others, chi_t), neg_logs=(mu,)))

    for i in range(config.K_R):
        power = AffineExpr.constant(-config.P[i])
        for g in cached_groups:
            if not cache.cached[g, i]:
                continue
            local = np.flatnonzero((rows[g] >= i * N_t) & (rows[g] < (i + 1) * N_t))
            select = np.zeros((len(rows[g]), len(rows[g])))
            select[local, local] = 1.0
            power = power + trace_functional(W[g], select)
        if len(power.idx):
            if power.value(x0) >= 0:
                raise InfeasibleExpansionPoint(f"eRRH {i} exceeds its phase-I power budget")
            b.constrain(AFFINE, f"power1[{i}]", ConvexFunction(affine=power))

    theta_t = float(expansion.theta)
    b.set_start(theta, theta_t)
    eta_needed = []
    for g in range(G):
        if g not in W:
            b.constrain(SUM_NEG_LOG, f"latency[{g}]", ConvexFunction(
                affine=AffineExpr.constant(math.log(S)), neg_logs=(var(layout.eta), var(layout.r2[g]))))
            eta_needed.append(S / r2_start[g])
            continue

        r1_t = float(expansion.r1[g])
        delay_tangent = phi(var(theta) + tau0, tau0 + theta_t)
        b.constrain(AFFINE, f"delay_split[{g}]", ConvexFunction(
            affine=delay_tangent + phi(var(r1[g]), r1_t) - math.log(S)))
        r1_start = min(r1_t * (1.0 - m), _min_rate_start(phase1_ratio[g], m))
        if r1_start <= floor:
            raise InfeasibleExpansionPoint(f"group {g} has no positive phase-I rate at the expansion point")
        b.set_start(r1[g], r1_start)
        if g not in psi:
            continue

        psi_t, kappa_t = float(expansion.psi[g]), float(expansion.kappa[g])
        b.constrain(AFFINE, f"remaining[{g}]", ConvexFunction(
            affine=S - var(r1[g], tau0) - var(psi[g]) - var(kappa[g])))
        b.constrain(SUM_NEG_LOG, f"phase1_share[{g}]", ConvexFunction(
            affine=phi(var(psi[g]), psi_t), neg_logs=(var(theta), var(r1[g]))))
        b.constrain(SUM_NEG_LOG, f"phase2_time[{g}]", ConvexFunction(
            affine=phi(var(kappa[g]), kappa_t), neg_logs=(var(layout.eta), var(layout.r2[g]))))

        psi_start = psi_t * (1.0 + math.log(theta_t * r1_start / psi_t) - m)
        if psi_start <= floor:
            raise InfeasibleExpansionPoint(f"group {g}: psi tangent point is inconsistent with theta * r1")
        kappa_start = max(S - tau0 * r1_start - psi_start, 0.0) + m * S
        exponent = kappa_start / kappa_t - 1.0
        if exponent > 200:
            raise InfeasibleExpansionPoint(f"group {g}: kappa tangent point too far from the start")
        b.set_start(psi[g], psi_start)
        b.set_start(kappa[g], kappa_start)
        eta_needed.append(kappa_t * math.exp(exponent) / r2_start[g])

    eta_start = max(eta_needed) * (1.0 + m) if eta_needed else 1.0
    b.set_start(layout.eta, eta_start)

    slacks = []
    if layout.fronthaul:
        for i, rate in layout.fronthaul_rates_at_expansion().items():
            if rate >= config.C[i]:
                raise InfeasibleExpansionPoint(f"eRRH {i} exceeds its fronthaul capacity at the expansion point")
            if rate <= floor:
                raise InfeasibleExpansionPoint("degenerate fronthaul rate at the expansion point")
        slacks = layout.add_penalty(theta, lam, rho, theta_t, m)
    return b.finish(_penalized_objective(layout.eta, theta, slacks, rho))
