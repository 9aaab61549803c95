#!/usr/bin/env python3
"""
Tests for the convex subproblem layer: complex plumbing, tangents, convex
function derivatives and the FCBT / PCBT / PCPT / max-min builders.
"""

import sys
import math

import numpy as np
import pytest

from errors import InfeasibleExpansionPoint, NonHermitianInput, SingularExpansionPoint
from network_model import CacheState, ChannelSet, Instance, NetworkConfig
from subproblem_ir import (
    AFFINE,
    NEG_LOG_DET,
    AffineExpr,
    ConvexFunction,
    FcbtExpansion,
    IRBuilder,
    PartialExpansion,
    QuadraticTerm,
    ReciprocalTerm,
    block_matrix,
    build_fcbt_subproblem,
    build_jceo_subproblem,
    build_pcbt_subproblem,
    build_pcpt_subproblem,
    fcbt_chi,
    hermitian_basis,
    hermitian_from_params,
    hermitian_to_params,
    penalty_count,
    phi,
    phi_bar,
    realify,
    trace_functional,
    var,
)
from transmission_schemes import OuterLoopSettings, PartialState, initialize_partial, initial_fcbt_beams, lift, warm_start


def _random_pd(rng, N, shift=0.1):
    A = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
    return A @ A.conj().T + shift * np.eye(N)


def _crafted_instance(c, f_g, groups, K_R=2, N_t=1, seed=0, **config):
    """Instance with an explicit cache state and random unit-scale channels."""
    c = np.asarray(c)
    K_U = len(groups)
    rng = np.random.default_rng(seed)
    h = (rng.standard_normal((K_U, K_R, N_t)) + 1j * rng.standard_normal((K_U, K_R, N_t))) / math.sqrt(2)
    config = NetworkConfig(K_R=K_R, K_U=K_U, N_t=N_t, G=len(f_g), F=c.shape[0], **config)
    return Instance(config, ChannelSet(h=h), CacheState(c=c, f_g=f_g, group_of_user=groups), seed=seed)


def _partial_expansion(instance, with_phase1=False):
    settings = OuterLoopSettings()
    init = initialize_partial(instance, settings)
    eps = 1e-6
    state = PartialState(wbar=lift(init.wbar, eps), omega=np.array(init.omega))
    if not with_phase1:
        return PartialExpansion(wbar=state.wbar, omega=state.omega)
    mask = np.repeat(instance.cache.cached, instance.config.N_t, axis=1).astype(bool)
    state.w = lift(init.w, eps, mask)
    warm_start(instance, state, settings)
    return PartialExpansion(wbar=state.wbar, omega=state.omega, theta=state.theta, w=state.w,
                            r1=state.r1, psi=state.psi, kappa=state.kappa)


MIXED = dict(c=[[1, 0], [0, 0], [1, 1]], f_g=[0, 1], groups=[0, 1, 1])
ALL_CACHED = dict(c=[[1, 1], [1, 1]], f_g=[0, 1], groups=[0, 1, 1])


def test_realify_examples():
    assert np.array_equal(realify(np.eye(1)), np.eye(2))
    M = np.array([[2, 1j], [-1j, 2]])
    eigenvalues = np.sort(np.linalg.eigvalsh(realify(M)))
    assert np.allclose(eigenvalues, [1, 1, 3, 3])
    with pytest.raises(NonHermitianInput):
        realify(np.array([[1, 2], [0, 1]]))


def test_realify_doubles_log_determinant():
    rng = np.random.default_rng(0)
    for N in (1, 2, 4):
        M = _random_pd(rng, N)
        _, complex_logdet = np.linalg.slogdet(M)
        _, real_logdet = np.linalg.slogdet(realify(M))
        assert real_logdet == pytest.approx(2 * complex_logdet)
        assert np.linalg.eigvalsh(realify(M)).min() > 0


def test_hermitian_parameterization():
    basis = hermitian_basis(3)
    assert basis.shape == (9, 3, 3)
    assert all(np.allclose(E, E.conj().T) for E in basis)
    X = np.array([[2.0, 1 - 1j, 0.5j], [1 + 1j, 3.0, 0.0], [-0.5j, 0.0, 1.0]])
    params = hermitian_to_params(X)
    assert np.allclose(hermitian_from_params(params, 3), X)
    assert np.allclose(np.tensordot(params, basis, axes=1), X)


def test_phi_scalar_examples():
    test_cases = [
        ((3.0, 3.0), math.log(3)),
        ((2.0, 1.0), 1.0),
    ]
    for (A, B), expected in test_cases:
        assert phi(A, B) == pytest.approx(expected)
    assert phi(2.0, 1.0) >= math.log(2)
    with pytest.raises(SingularExpansionPoint):
        phi(1.0, 0.0)
    with pytest.raises(SingularExpansionPoint):
        phi(np.eye(2), np.diag([1.0, 0.0]))


def test_phi_overestimates_log_det():
    """The tangent lies above ln det everywhere and touches at the expansion point."""
    rng = np.random.default_rng(1)
    for _ in range(1000):
        N = rng.integers(1, 4)
        A, B = _random_pd(rng, N), _random_pd(rng, N)
        logdet_a = np.linalg.slogdet(A)[1]
        assert phi(A, B) >= logdet_a - 1e-9
    B = _random_pd(rng, 3)
    assert phi(B, B) == pytest.approx(np.linalg.slogdet(B)[1])


def test_phi_affine_inputs_match_numeric():
    b = IRBuilder("phi")
    s = b.scalar("s")
    X = b.hermitian("X", 2)
    rng = np.random.default_rng(2)
    A, B = _random_pd(rng, 2), _random_pd(rng, 2)
    x = np.concatenate(([4.0], hermitian_to_params(A)))

    scalar_tangent = phi(var(s) + 1.0, 2.0)
    assert scalar_tangent.value(x) == pytest.approx(phi(5.0, 2.0))

    matrix_tangent = phi(block_matrix(X), B)
    assert isinstance(matrix_tangent, AffineExpr)
    assert matrix_tangent.value(x) == pytest.approx(phi(A, B))


def test_phi_bar_examples():
    rng = np.random.default_rng(3)
    h = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    w_t = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    chi_t = 1.7
    assert phi_bar(w_t, chi_t, w_t, chi_t, h) == pytest.approx(abs(np.vdot(h, w_t)) ** 2 / chi_t)

    e1, e2 = np.array([1.0, 0, 0]), np.array([0, 1.0, 0])
    assert phi_bar(e2, 1.0, 2 * e2, 2.0, e1) == pytest.approx(0.0)
    with pytest.raises(SingularExpansionPoint):
        phi_bar(e1, 1.0, e1, 0.0, e1)


def test_phi_bar_underestimates_ratio():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        h, w, w_t = (rng.standard_normal(2) + 1j * rng.standard_normal(2) for _ in range(3))
        chi, chi_t = rng.uniform(0.1, 5.0, size=2)
        assert phi_bar(w, chi, w_t, chi_t, h) <= abs(np.vdot(h, w)) ** 2 / chi + 1e-9


def test_convex_function_derivatives_match_finite_differences():
    b = IRBuilder("fd")
    v = b.vector("v", 3)
    X = b.hermitian("X", 2)
    fn = ConvexFunction(
        affine=AffineExpr(v.indices[:2], np.array([2.0, -1.0]), 0.5),
        quadratics=(QuadraticTerm(v.indices[:2], np.array([[1.0, 2.0], [0.0, 1.0]])),),
        reciprocals=(ReciprocalTerm(int(v.indices[2]), 1.5),),
        neg_logs=(var(v) + 3.0,),
        neg_logdets=(block_matrix(X),),
    )
    M = np.array([[2.0, 0.5 + 0.3j], [0.5 - 0.3j, 1.5]])
    x = np.concatenate(([0.3, -0.2, 0.7], hermitian_to_params(M)))

    value, grad, hess = fn.derivatives(x)
    assert value == pytest.approx(fn.value(x))
    assert -np.log(np.linalg.det(M).real) == pytest.approx(
        value - (2 * 0.3 + 0.2 + 0.5) - (0.3 - 0.4) ** 2 - 0.2 ** 2 - 1.5 / 0.7 + math.log(3.3))

    step = 1e-6
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = step
        numeric_grad = (fn.value(x + e) - fn.value(x - e)) / (2 * step)
        numeric_hess = (fn.derivatives(x + e)[1] - fn.derivatives(x - e)[1]) / (2 * step)
        assert numeric_grad == pytest.approx(grad[j], rel=1e-5, abs=1e-6)
        assert np.allclose(numeric_hess, hess[:, j], rtol=1e-4, atol=1e-5)


def test_convex_function_outside_domain():
    fn = ConvexFunction(neg_logs=(AffineExpr.variable(0),), reciprocals=(ReciprocalTerm(1, 1.0),))
    test_cases = [
        (np.array([1.0, 1.0]), True),
        (np.array([-1.0, 1.0]), False),
        (np.array([1.0, 0.0]), False),
    ]
    for x, inside in test_cases:
        assert fn.in_domain(x) is inside
        assert math.isfinite(fn.value(x)) is inside


def test_trace_functional():
    b = IRBuilder("trace")
    X = b.hermitian("X", 2)
    H = np.array([[1.0, 2 - 1j], [2 + 1j, 3.0]])
    M = np.array([[2.0, 0.5j], [-0.5j, 1.0]])
    x = hermitian_to_params(M)
    assert trace_functional(X, H).value(x) == pytest.approx(np.real(np.trace(H @ M)))
    rows = np.array([1])
    assert trace_functional(X, np.array([[3.0]]), rows).value(x) == pytest.approx(3.0)


def test_builder_rejects_bad_start():
    b = IRBuilder("bad")
    s = b.scalar("s")
    b.set_start(s, 2.0)
    b.constrain(AFFINE, "s_below_one", ConvexFunction(affine=var(s) - 1.0))
    with pytest.raises(InfeasibleExpansionPoint):
        b.finish(ConvexFunction(affine=var(s)))

    b = IRBuilder("missing")
    b.scalar("s")
    with pytest.raises(ValueError):
        b.finish(ConvexFunction())


def test_fcbt_subproblem_layout():
    """Masked beam entries are not variables; the start point is strictly feasible."""
    instance = _crafted_instance(c=[[1, 0], [1, 1]], f_g=[0, 1], groups=[0, 1])
    w = initial_fcbt_beams(instance)
    ir = build_fcbt_subproblem(instance, FcbtExpansion(w, fcbt_chi(instance, w)))

    G, K_U = 2, 2
    assert len(ir.blocks) == 1 + G + G + 2 * K_U
    assert ir.block("w[0]").size == 2
    assert ir.block("w[1]").size == 4
    labels = [atom.label for atom in ir.constraints]
    assert labels.count("power[0]") == 1 and labels.count("power[1]") == 1
    assert sum(label.startswith("rate[") for label in labels) == K_U
    assert ir.is_strictly_feasible(ir.start)
    assert math.isfinite(ir.objective.value(ir.start))


def test_fcbt_subproblem_requires_a_caching_errh():
    instance = _crafted_instance(**MIXED)
    w = np.zeros((2, 2), dtype=complex)
    with pytest.raises(InfeasibleExpansionPoint):
        build_fcbt_subproblem(instance, FcbtExpansion(w, np.ones(3)))


def test_pcbt_subproblem_penalty_and_objective():
    instance = _crafted_instance(**MIXED)
    lam, rho = 0.5, 0.5
    ir = build_pcbt_subproblem(instance, _partial_expansion(instance), lam, rho)

    hinges = [atom for atom in ir.constraints if atom.label.startswith("hinge")]
    assert len(hinges) == penalty_count(instance) == 2
    assert all(atom.kind == NEG_LOG_DET for atom in hinges)
    assert ir.has_block("theta")
    assert ir.is_strictly_feasible(ir.start)

    values = ir.unpack(ir.start)
    expected = values["eta"] + values["theta"] + (values["t[0]"] ** 2 + values["t[1]"] ** 2) / (2 * rho)
    assert ir.objective.value(ir.start) == pytest.approx(expected)
    dump = ir.dump()
    assert dump.startswith("subproblem pcbt")
    assert "hinge[0]" in dump and "fronthaul[1]" in dump


def test_pcbt_subproblem_all_cached_has_no_penalty():
    instance = _crafted_instance(**ALL_CACHED)
    ir = build_pcbt_subproblem(instance, _partial_expansion(instance), 0.5, 0.5)
    assert penalty_count(instance) == 0
    assert not ir.has_block("theta")
    assert not any(atom.label.startswith(("hinge", "fronthaul")) for atom in ir.constraints)
    assert any("penalty empty" in note for note in ir.notes)


def test_jceo_subproblem_is_max_min_rate():
    instance = _crafted_instance(**MIXED)
    ir = build_jceo_subproblem(instance, _partial_expansion(instance))
    assert not ir.has_block("theta")
    assert ir.objective.value(ir.start) == pytest.approx(ir.unpack(ir.start)["eta"])
    assert any(atom.label == "fronthaul[0]" for atom in ir.constraints)


def test_pcpt_subproblem_constraint_swaps():
    """Uncached groups keep the bulk latency constraint; cached groups get the split constraints."""
    instance = _crafted_instance(**MIXED)
    ir = build_pcpt_subproblem(instance, _partial_expansion(instance, with_phase1=True), 0.5, 0.5)
    labels = {atom.label for atom in ir.constraints}
    assert "latency[1]" in labels
    assert "latency[0]" not in labels
    assert {"delay_split[0]", "rate1[0]", "power1[0]"} <= labels
    assert ir.has_block("W[0]") and not ir.has_block("W[1]")
    assert ir.block("W[0]").dimension == 1
    assert ir.is_strictly_feasible(ir.start)


def test_pcpt_subproblem_needs_theta():
    instance = _crafted_instance(**MIXED)
    with pytest.raises(ValueError):
        build_pcpt_subproblem(instance, _partial_expansion(instance), 0.5, 0.5)


def main():
    """Run the tests in this file."""
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
