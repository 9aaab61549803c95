#!/usr/bin/env python3
"""
Tests for the transmission scheme drivers and rank-one extraction.

The multi-seed acceptance checks at desk scale are marked slow; run them with
pytest -m slow.
"""

import sys
import math

import numpy as np
import pytest

from barrier_solver import solve
from errors import ConfigError
from network_model import (
    CacheState,
    ChannelSet,
    Instance,
    NetworkConfig,
    build_instance,
    fronthaul_rate,
    group_rates,
    power_per_errh,
)
from transmission_schemes import (
    SCHEMES,
    OuterLoopSettings,
    PartialState,
    _build,
    _fronthaul_rates,
    _initial_state,
    _matrix_group_rates,
    initial_fcbt_beams,
    initialize_partial,
    lift,
    penalty_residual,
    randomize_rank_one,
    solve_fcbt,
    solve_jceo_baseline,
    solve_pcbt,
    solve_pcpt,
    solve_scheme,
    solve_tswc,
    warm_start,
)

FAST = OuterLoopSettings(max_outer=8, max_inner=25, n_candidates=10)
SHORT = OuterLoopSettings(max_outer=3, max_inner=10, n_candidates=5)

MIXED = dict(c=[[1, 0], [0, 0], [1, 1]], f_g=[0, 1], groups=[0, 1, 1])


def _crafted_instance(c, f_g, groups, K_R=2, N_t=1, seed=0, h=None, **config):
    c = np.asarray(c)
    K_U = len(groups)
    if h is None:
        rng = np.random.default_rng(seed)
        h = (rng.standard_normal((K_U, K_R, N_t)) + 1j * rng.standard_normal((K_U, K_R, N_t))) / math.sqrt(2)
    config = NetworkConfig(K_R=K_R, K_U=K_U, N_t=N_t, G=len(f_g), F=c.shape[0], **config)
    return Instance(config, ChannelSet(h=h), CacheState(c=c, f_g=f_g, group_of_user=groups), seed=seed)


def _non_increasing_within_outer(solution, tol=1e-9):
    by_outer = {}
    for row in solution.trace:
        by_outer.setdefault(row.outer_iter, []).append(row.objective)
    return all(b <= a + tol * max(1.0, abs(a))
               for values in by_outer.values() for a, b in zip(values, values[1:]))


def test_outer_loop_settings_validation():
    test_cases = [
        (dict(omega=1.0), "omega"),
        (dict(nu=0.0), "nu"),
        (dict(delta=1.5), "delta"),
        (dict(epsilon=0.0), "epsilon"),
        (dict(max_inner=0), "max_inner"),
        (dict(n_candidates=0), "n_candidates"),
        (dict(retangent_passes=0), "retangent_passes"),
        (dict(warm_start_rate_form="exact"), "warm_start_rate_form"),
    ]
    for kwargs, key in test_cases:
        with pytest.raises(ConfigError) as info:
            OuterLoopSettings(**kwargs)
        assert info.value.key == key


def test_solve_scheme_dispatch():
    assert set(SCHEMES) == {"fcbt", "pcbt", "pcpt", "tswc", "jceo"}
    instance = _crafted_instance(**MIXED)
    with pytest.raises(ConfigError) as info:
        solve_scheme("mimo", instance)
    assert info.value.key == "scheme"


def test_fcbt_single_user_closed_form():
    instance = _crafted_instance(c=[[1]], f_g=[0], groups=[0], K_R=1, h=np.ones((1, 1, 1)),
                                 P=4.0, sigma2=1.0, S=1.5, xi=1.0)
    solution = solve_fcbt(instance)
    assert solution.status == "converged"
    assert solution.latency == pytest.approx(1.5 / math.log(5.0), rel=1e-4)
    assert solution.tau == 0.0
    assert power_per_errh(solution.beamformers.w, 1)[0] <= 4.0 * (1 + 1e-8)


def test_fcbt_symmetric_groups_get_equal_rates():
    h = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    instance = _crafted_instance(c=[[1, 1], [1, 1]], f_g=[0, 1], groups=[0, 1], h=h, P=10.0)
    solution = solve_fcbt(instance)
    r1 = solution.r_g_phase1
    assert r1[0] == pytest.approx(r1[1], rel=1e-6)
    assert solution.latency == pytest.approx(1.5 / r1.min(), rel=1e-12)


def test_initial_fcbt_beams_respect_power_and_mask():
    instance = _crafted_instance(**MIXED).full_cache()
    w = initial_fcbt_beams(instance)
    power = power_per_errh(w, instance.config.N_t)
    assert np.allclose(power, (1 - 1e-3) * np.asarray(instance.config.P))

    partial = _crafted_instance(c=[[1, 0], [0, 1]], f_g=[0, 1], groups=[0, 1])
    w = initial_fcbt_beams(partial)
    assert w[0, 1] == 0 and w[1, 0] == 0
    assert w[0, 0] != 0 and w[1, 1] != 0


def test_fcbt_trace_is_non_increasing():
    for seed in range(3):
        instance = build_instance(NetworkConfig(K_U=3), seed)
        solution = solve_fcbt(instance, FAST)
        objectives = solution.objectives
        assert objectives
        assert all(b <= a * (1 + 1e-9) for a, b in zip(objectives, objectives[1:]))
        assert solution.latency <= objectives[-1] * (1 + 1e-6)


def test_initialize_partial_fronthaul_scaling():
    instance = _crafted_instance(**MIXED)
    config = instance.config
    beams = initialize_partial(instance)

    # eRRH 0 has one uncached requested file, so |v|^2 / omega = delta (e^C - 1).
    ratio = abs(beams.wbar[1, 0]) ** 2 / np.real(beams.omega[0, 0, 0])
    assert ratio == pytest.approx(0.5 * math.expm1(2.0), rel=1e-12)
    # eRRH 1 serves both groups over fronthaul and splits the budget.
    ratio = abs(beams.wbar[0, 1]) ** 2 / np.real(beams.omega[1, 0, 0])
    assert ratio == pytest.approx(0.25 * math.expm1(2.0), rel=1e-12)

    power = power_per_errh(beams.wbar, config.N_t, beams.omega)
    assert np.allclose(power, (1 - 1e-3) * np.asarray(config.P))
    for i in instance.cache.fronthaul_errhs():
        assert fronthaul_rate(i, beams, instance.cache) < config.C[i]


def test_initialize_partial_without_fronthaul_traffic():
    instance = _crafted_instance(**MIXED).full_cache()
    beams = initialize_partial(instance)
    assert not np.any(beams.omega)
    assert np.all(np.abs(beams.wbar) > 0)


def test_lift_adds_masked_identity():
    w = np.array([[1.0 + 1j, 2.0], [0.0, 1j]])
    test_cases = [
        (None, np.eye(2), np.eye(2)),
        (np.array([[True, False], [False, True]]), np.diag([1.0, 0.0]), np.diag([0.0, 1.0])),
    ]
    for mask, first, second in test_cases:
        mats = lift(w, 0.1, mask)
        assert np.allclose(mats[0], np.outer(w[0], w[0].conj()) + 0.1 * first)
        assert np.allclose(mats[1], np.outer(w[1], w[1].conj()) + 0.1 * second)


def test_penalty_residual_vanishes_at_consistent_theta():
    instance = _crafted_instance(**MIXED)
    init = initialize_partial(instance)
    state = PartialState(wbar=lift(init.wbar, 1e-6), omega=np.array(init.omega))
    worst = min(fronthaul_rate(i, init, instance.cache) for i in instance.cache.fronthaul_errhs())

    state.theta = instance.config.S / worst
    residual, approx = penalty_residual(instance, state)
    assert residual == pytest.approx(0.0, abs=1e-4)
    assert approx == pytest.approx(0.0, abs=1e-4)

    state.theta *= 2
    residual, approx = penalty_residual(instance, state)
    assert residual < 0
    assert approx > 0


def test_warm_start_keeps_the_pipeline_consistent():
    instance = _crafted_instance(**MIXED)
    settings = OuterLoopSettings()
    init = initialize_partial(instance, settings)
    mask = np.repeat(instance.cache.cached, instance.config.N_t, axis=1).astype(bool)
    state = PartialState(wbar=lift(init.wbar, 1e-6), omega=np.array(init.omega), w=lift(init.w, 1e-6, mask))
    warm_start(instance, state, settings)

    config = instance.config
    assert state.theta > 0
    assert state.r1[1] == 0.0
    assert state.r1[0] > 0
    assert np.allclose(state.psi, state.theta * state.r1)
    assert np.allclose(state.kappa, config.S - (config.tau0 + state.theta) * state.r1)
    assert np.all(state.kappa >= 0)


def test_randomize_rank_one_passthrough():
    instance = _crafted_instance(**MIXED)
    rng = np.random.default_rng(3)
    w = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
    W = np.einsum("ga,gb->gab", w, w.conj())
    omega = np.array(initialize_partial(instance).omega)

    beams = randomize_rank_one(W, omega, instance, np.zeros(2))
    for g in range(2):
        assert abs(np.vdot(beams.wbar[g], w[g])) == pytest.approx(np.linalg.norm(w[g]) ** 2, rel=1e-9)


def test_randomize_rank_two_single_group():
    instance = _crafted_instance(c=[[1]], f_g=[0], groups=[0, 0], K_R=1, N_t=2, seed=4, P=100.0, xi=1.0)
    W = np.array([np.diag([50.0, 40.0]).astype(complex)])
    h = instance.channels.stacked
    relaxed = np.log1p(np.real(np.einsum("ka,ab,kb->k", h.conj(), W[0], h)))
    targets = np.array([0.5 * relaxed.min()])

    beams = randomize_rank_one(W, None, instance, targets, phase="full", scheme="fcbt")
    assert power_per_errh(beams.w, 2)[0] <= 100.0 * (1 + 1e-8)
    rates = group_rates(beams, instance.channels, instance.config.sigma2, "full", 1)
    assert rates[0] >= targets[0] * (1 - 1e-8)


def test_pcbt_output_is_feasible():
    instance = _crafted_instance(**MIXED)
    solution = solve_pcbt(instance, FAST)
    config, beams = instance.config, solution.beamformers
    assert solution.status in ("converged", "max-iterations")
    assert solution.tau > config.tau0
    assert np.all(power_per_errh(beams.wbar, config.N_t, beams.omega) <= np.asarray(config.P) * (1 + 1e-8))
    for i in instance.cache.fronthaul_errhs():
        assert fronthaul_rate(i, beams, instance.cache) <= config.C[i] * (1 + 1e-6)
    assert _non_increasing_within_outer(solution)
    assert all(row.lam is not None and row.rho is not None for row in solution.trace)


def test_pcpt_output_respects_the_fetch_delay():
    instance = _crafted_instance(**MIXED)
    solution = solve_pcpt(instance, FAST)
    assert solution.scheme == "pcpt"
    assert solution.beamformers.w is not None
    r1 = solution.r_g_phase1
    assert np.all(solution.tau * r1 <= instance.config.S * (1 + 1e-9))
    assert r1[1] == 0.0
    assert _non_increasing_within_outer(solution)


def test_delegation_on_degenerate_caches():
    full = _crafted_instance(**MIXED).full_cache()
    fcbt = solve_fcbt(full, FAST)
    test_cases = [
        (solve_pcbt, "delegated-to-fcbt"),
        (solve_pcpt, "delegated-to-fcbt"),
    ]
    for driver, flag in test_cases:
        solution = driver(full, FAST)
        assert flag in solution.flags
        assert solution.tau == 0.0
        assert solution.latency == pytest.approx(fcbt.latency, rel=1e-12)

    empty = _crafted_instance(**MIXED).zero_cache()
    pcbt = solve_pcbt(empty, FAST)
    pcpt = solve_pcpt(empty, FAST)
    assert "delegated-to-pcbt" in pcpt.flags
    assert pcpt.scheme == "pcpt"
    assert pcpt.latency == pytest.approx(pcbt.latency, rel=1e-12)


def test_tswc_equals_pcbt_without_caching():
    instance = _crafted_instance(**MIXED).zero_cache()
    tswc = solve_tswc(instance, FAST)
    pcbt = solve_pcbt(instance, FAST)
    assert tswc.scheme == "tswc"
    assert tswc.latency == pytest.approx(pcbt.latency, rel=1e-12)
    assert instance.zero_cache().cache.c.tolist() == instance.cache.c.tolist()


def test_schemes_are_deterministic():
    instance = _crafted_instance(**MIXED)
    first = solve_pcbt(instance, FAST)
    second = solve_pcbt(instance, FAST)
    assert first.latency == second.latency
    assert first.objectives == second.objectives


def test_warm_start_tangent_is_reachable_on_default_instances():
    settings = OuterLoopSettings()
    for seed in (1, 2):
        instance = build_instance(NetworkConfig(), seed)
        state = _initial_state(instance, settings)
        warm_start(instance, state, settings)
        achieved = _matrix_group_rates(instance, state.w, None)
        cached = instance.cache.cached.sum(axis=1) > 0
        assert np.all(state.r1[cached] <= achieved[cached] * (1 + 1e-12))
        assert np.all(state.psi[cached] > 0)
        ir = _build(instance, "pcpt", state, settings.lambda0, settings.rho0, settings)
        assert ir.is_strictly_feasible(ir.start)


def test_first_subproblem_solves_on_default_instances():
    settings = OuterLoopSettings()
    test_cases = [
        (1, "pcbt"), (2, "pcbt"), (4, "pcbt"),
        (2, "tswc"),
        (1, "jceo"), (2, "jceo"),
    ]
    for seed, scheme in test_cases:
        instance = build_instance(NetworkConfig(), seed)
        if scheme == "tswc":
            instance = instance.zero_cache()
        assert instance.cache.fronthaul_errhs()
        state = _initial_state(instance, settings)
        if scheme != "jceo":
            state.theta = instance.config.S / min(_fronthaul_rates(instance, state.wbar, state.omega).values())
        report = solve(_build(instance, scheme, state, settings.lambda0, settings.rho0, settings))
        assert report.newton_steps > 0
        assert report.status in ("converged", "max-iterations", "stalled")


def test_partial_schemes_run_on_default_instances():
    for seed in (1, 2):
        instance = build_instance(NetworkConfig(), seed)
        for driver in (solve_pcbt, solve_pcpt, solve_jceo_baseline):
            solution = driver(instance, SHORT)
            assert solution.status in ("converged", "max-iterations")
            assert solution.trace
            assert math.isfinite(solution.latency)


def test_full_cache_covariance_loop_matches_fcbt():
    h = np.array([[[1.0], [0.0]], [[0.0], [1.0]]])
    instance = _crafted_instance(c=[[1, 1], [1, 1]], f_g=[0, 1], groups=[0, 1], h=h, P=10.0)
    fcbt = solve_fcbt(instance, FAST)
    pcbt = solve_pcbt(instance, FAST, delegate=False)
    assert "delegated-to-fcbt" not in pcbt.flags
    assert pcbt.trace
    assert all(row.lam is None and row.residual is None for row in pcbt.trace)
    assert pcbt.tau == 0.0
    assert pcbt.latency == pytest.approx(1.5 / math.log(11.0), rel=1e-3)
    assert pcbt.latency == pytest.approx(fcbt.latency, rel=1e-3)
    assert pcbt.relaxed_latency == pytest.approx(fcbt.latency, rel=1e-3)


def test_empty_cache_pipelined_loop_matches_pcbt():
    instance = _crafted_instance(**MIXED).zero_cache()
    pcbt = solve_pcbt(instance, FAST)
    pcpt = solve_pcpt(instance, FAST, delegate=False)
    assert "delegated-to-pcbt" not in pcpt.flags
    assert pcpt.scheme == "pcpt"
    assert np.all(pcpt.r_g_phase1 == 0.0)
    assert pcpt.latency == pytest.approx(pcbt.latency, rel=1e-2)


def test_single_link_schemes_meet_the_closed_form():
    """One eRRH, one user, nothing cached: the fronthaul binds and the full power is used."""
    instance = _crafted_instance(c=[[0]], f_g=[0], groups=[0], K_R=1, h=np.ones((1, 1, 1)),
                                 P=10.0, C=2.0, xi=0.0)
    omega = 10.0 / math.exp(2.0)
    rate = math.log1p((10.0 - omega) / (1.0 + omega))
    expected = 1.5 / rate + 0.01 + 1.5 / 2.0

    pcbt = solve_pcbt(instance, FAST)
    jceo = solve_jceo_baseline(instance, FAST)
    test_cases = [pcbt, jceo]
    for solution in test_cases:
        assert solution.latency == pytest.approx(expected, rel=1e-3)
    assert jceo.latency == pytest.approx(pcbt.latency, rel=1e-3)
    assert all(row.lam is None for row in jceo.trace)


def test_jceo_output_is_feasible():
    instance = _crafted_instance(**MIXED)
    solution = solve_jceo_baseline(instance, FAST)
    config, beams = instance.config, solution.beamformers
    assert solution.scheme == "jceo"
    assert solution.status in ("converged", "max-iterations")
    assert np.all(power_per_errh(beams.wbar, config.N_t, beams.omega) <= np.asarray(config.P) * (1 + 1e-8))
    for i in instance.cache.fronthaul_errhs():
        assert fronthaul_rate(i, beams, instance.cache) <= config.C[i] * (1 + 1e-6)
    assert solution.latency == pytest.approx(config.S / solution.r_g_phase2.min() + solution.tau, rel=1e-12)

    full = _crafted_instance(**MIXED).full_cache()
    assert "delegated-to-fcbt" in solve_jceo_baseline(full, FAST).flags


def test_extracted_latency_is_at_least_the_relaxed_latency():
    instance = _crafted_instance(**MIXED)
    test_cases = [
        (solve_pcbt, instance),
        (solve_tswc, instance),
        (solve_pcbt, _crafted_instance(**MIXED, seed=5)),
    ]
    for driver, case in test_cases:
        solution = driver(case, FAST)
        assert solution.relaxed_latency is not None
        assert solution.latency >= solution.relaxed_latency * (1 - 1e-5)


def test_randomized_partial_beams_are_feasible():
    instance = _crafted_instance(**MIXED)
    config, cache = instance.config, instance.cache
    omega = np.full((2, 1, 1), 5.0 + 0j)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((2, 2, 2)) + 1j * rng.standard_normal((2, 2, 2))
        W = np.einsum("gab,gcb->gac", a, a.conj()) / 4.0
        targets = 0.5 * _matrix_group_rates(instance, W, omega)

        beams = randomize_rank_one(W, omega, instance, targets, OuterLoopSettings(n_candidates=20),
                                   rng=np.random.default_rng(seed))
        assert np.all(power_per_errh(beams.wbar, config.N_t, beams.omega) <= np.asarray(config.P) * (1 + 1e-8))
        for i in cache.fronthaul_errhs():
            assert fronthaul_rate(i, beams, cache) <= config.C[i] * (1 + 1e-8)
        rates = group_rates(beams, instance.channels, config.sigma2, "partial", cache.G)
        assert np.all(rates >= targets * (1 - 1e-8))


@pytest.mark.slow
def test_reduction_identities_on_matched_seeds():
    config = NetworkConfig()
    for seed in range(10):
        instance = build_instance(config, seed)
        full, empty = instance.full_cache(), instance.zero_cache()
        fcbt = solve_fcbt(full)
        assert solve_pcbt(full).latency == pytest.approx(fcbt.latency, rel=1e-3)
        assert solve_pcpt(full).latency == pytest.approx(fcbt.latency, rel=1e-3)
        pcbt = solve_pcbt(empty)
        assert solve_pcpt(empty).latency == pytest.approx(pcbt.latency, rel=1e-3)

        # The same identities through the covariance loops themselves.
        assert solve_pcbt(full, delegate=False).latency == pytest.approx(fcbt.latency, rel=1e-2)
        assert solve_pcpt(empty, delegate=False).latency == pytest.approx(pcbt.latency, rel=1e-2)


@pytest.mark.slow
def test_partial_schemes_never_fail_before_the_first_iteration():
    config = NetworkConfig()
    for seed in range(6):
        instance = build_instance(config, seed)
        for tag in ("pcbt", "pcpt", "tswc", "jceo"):
            solution = solve_scheme(tag, instance)
            assert solution.trace, f"{tag} seed {seed}: {solution.message}"
            assert solution.status != "infeasible-input"


@pytest.mark.slow
def test_penalty_loops_close_the_delay_gap():
    config = NetworkConfig()
    converged = 0
    for seed in range(10):
        instance = build_instance(config, seed)
        for driver in (solve_pcbt, solve_pcpt):
            solution = driver(instance)
            if solution.status != "converged" or "delegated-to-fcbt" in solution.flags:
                continue
            converged += 1
            assert abs(solution.trace[-1].residual) <= 1e-5
            if driver is solve_pcbt:
                assert solution.latency >= solution.relaxed_latency * (1 - 1e-5)
    assert converged >= 10


@pytest.mark.slow
def test_max_min_baseline_against_pcbt():
    test_cases = [
        (2.0, "close"),
        (0.8, "pcbt-wins"),
    ]
    for S, expectation in test_cases:
        config = NetworkConfig(S=S, C=1.5)
        pcbt, jceo = [], []
        for seed in range(10):
            instance = build_instance(config, seed)
            pcbt.append(solve_pcbt(instance).latency)
            jceo.append(solve_jceo_baseline(instance).latency)
        pcbt_mean, jceo_mean = float(np.mean(pcbt)), float(np.mean(jceo))
        if expectation == "close":
            assert abs(pcbt_mean - jceo_mean) <= 0.05 * jceo_mean
        else:
            assert pcbt_mean <= jceo_mean


@pytest.mark.slow
def test_scheme_ordering_per_seed_and_in_the_mean():
    config = NetworkConfig(xi=0.5, C=2.0, S=1.5)
    order = ("fcbt", "pcpt", "pcbt", "tswc")
    latencies = {tag: [] for tag in order}
    for seed in range(20):
        instance = build_instance(config, seed)
        for tag in order:
            solution = solve_scheme(tag, instance)
            assert _non_increasing_within_outer(solution)
            latencies[tag].append(solution.latency)
    means = {tag: float(np.mean(values)) for tag, values in latencies.items()}
    assert means["fcbt"] <= means["pcpt"] <= means["pcbt"] <= means["tswc"]
    for better, worse in zip(order, order[1:]):
        wins = np.mean(np.array(latencies[better]) <= np.array(latencies[worse]) * (1 + 1e-6))
        assert wins >= 0.8, f"{better} <= {worse} on {wins:.0%} of seeds"


def main():
    """Run the tests in this file."""
    return pytest.main([__file__, "-v"])


if __name__ == "__main__":
    sys.exit(main())
