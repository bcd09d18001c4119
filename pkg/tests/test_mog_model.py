from __future__ import annotations

import warnings

import numpy as np
import pytest

from twostage.downstream import orbit_invariance_check
from twostage.errors import GaugeWarning, InputError, ModelError, OutOfChartError
from twostage.mog_model import (
    InteractionConfig,
    MixtureFitOptions,
    MixtureParams,
    SignalSpec,
    align_to_reference,
    enumerate_alignments,
    feature_dim,
    fisher_information,
    fit_centers,
    gating_features,
    gating_state,
    interaction_term_mc,
    mixture_log_likelihood,
    mixture_score_hessian,
    permutation_equivariance_gap,
    sample_mixture,
)

SMALL = InteractionConfig(n_fisher=20_000, n_proj=100_000, n_eval=100_000, seed=0)


def _neg_log_density(U, x):
    return -mixture_log_likelihood(x[None, :], U)


# ---------------------------------------------------------------- parameters and sampling


def test_params_validation():
    with pytest.raises(ModelError):
        MixtureParams(np.ones((1, 3)))
    with pytest.raises(ModelError):
        MixtureParams(np.ones((2, 3)))
    with pytest.raises(InputError):
        MixtureParams.simplex(4, 3, 1.0)


def test_canonical_order():
    p = MixtureParams(np.array([[0.0, 1.0], [2.0, 0.0], [0.0, 3.0]])).canonical()
    assert np.array_equal(p.centers, [[2.0, 0.0], [0.0, 3.0], [0.0, 1.0]])


def test_sample_moments(rng):
    p = MixtureParams(rng.standard_normal((3, 4)) * 2)
    x = sample_mixture(p, 100_000, rng)
    se = x.std(axis=0) / np.sqrt(len(x))
    assert np.all(np.abs(x.mean(axis=0) - p.mean) < 3.5 * se)
    cov = np.cov(x.T)
    expected = np.eye(4) + p.second_moment / p.K
    assert np.linalg.norm(cov - expected, 2) < 0.05 * np.linalg.norm(expected, 2)


# ---------------------------------------------------------------- score and Hessian


def test_symmetric_score_example():
    u = np.array([1.5, -0.5])
    g, _ = mixture_score_hessian(np.array([u, -u]), np.zeros(2))
    assert np.allclose(g, [u / 2, -u / 2])


def test_score_hessian_finite_differences(rng):
    for _ in range(5):
        U = rng.standard_normal((3, 2)) * 1.5
        x = rng.standard_normal(2)
        g, H = mixture_score_hessian(U, x)
        h = 1e-5
        fd_g = np.zeros(U.size)
        fd_H = np.zeros((U.size, U.size))
        for a in range(U.size):
            E = np.zeros(U.size)
            E[a] = h
            Up, Um = U + E.reshape(U.shape), U - E.reshape(U.shape)
            fd_g[a] = (_neg_log_density(Up, x) - _neg_log_density(Um, x)) / (2 * h)
            fd_H[:, a] = (mixture_score_hessian(Up, x)[0] - mixture_score_hessian(Um, x)[0]).ravel() / (2 * h)
        assert np.abs(fd_g - g.ravel()).max() < 1e-7
        assert np.abs(fd_H - H).max() < 1e-6


# ---------------------------------------------------------------- fitting and gauge


def test_fit_consistency():
    ref = MixtureParams.simplex(2, 2, 3.0).canonical()
    x = sample_mixture(ref, 100_000, np.random.default_rng(1))
    fit = fit_centers(x, 2, MixtureFitOptions(seed=2), reference=ref)
    assert np.abs(fit.centers - ref.centers).max() < 0.05


def test_fit_deterministic():
    ref = MixtureParams.simplex(3, 3, 2.5).canonical()
    x = sample_mixture(ref, 5_000, np.random.default_rng(3))
    a = fit_centers(x, 3, MixtureFitOptions(seed=4), reference=ref)
    b = fit_centers(x, 3, MixtureFitOptions(seed=4), reference=ref)
    assert np.array_equal(a.centers, b.centers)


def test_fit_too_few_samples():
    with pytest.raises(InputError):
        fit_centers(np.zeros((10, 2)), 2)


def test_relabeled_reference_permutes_output():
    ref = MixtureParams.simplex(3, 3, 3.0).canonical()
    x = sample_mixture(ref, 20_000, np.random.default_rng(5))
    perm = [2, 0, 1]
    a = fit_centers(x, 3, MixtureFitOptions(seed=6), reference=ref)
    b = fit_centers(x, 3, MixtureFitOptions(seed=6), reference=ref.permuted(perm))
    assert np.array_equal(b.centers, a.centers[perm])
    gs = gating_state(ref)
    probe = sample_mixture(ref, 50, np.random.default_rng(0))
    fa = gating_features(probe, a.centers, gs).reshape(50, 3, -1)
    fb = gating_features(probe, b.centers, gs).reshape(50, 3, -1)
    assert np.abs(fb - fa[:, perm, :]).max() < 1e-12


def test_alignment_matches_enumeration(rng):
    ref = MixtureParams(rng.standard_normal((4, 3)) * 3)
    noisy = ref.centers[[3, 1, 0, 2]] + 0.1 * rng.standard_normal((4, 3))
    aligned = align_to_reference(noisy, ref)
    best_cost, best_perm = enumerate_alignments(noisy, ref)[0]
    assert np.array_equal(aligned, noisy[list(best_perm)])


def test_ambiguous_alignment_warns():
    ref = MixtureParams(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    centers = np.array([[0.0, 1.0], [0.0, -1.0]])
    with pytest.warns(GaugeWarning):
        align_to_reference(centers, ref)


# ---------------------------------------------------------------- gating


def test_two_center_projector():
    beta = 1.3
    p = MixtureParams(np.array([[beta, 0.0, 0.0], [-beta, 0.0, 0.0]]))
    assert np.allclose(p.second_moment, np.diag([2 * beta**2, 0, 0]))
    gs = gating_state(p)
    assert gs.r_star == 1
    assert np.allclose(gs.projector, np.diag([1.0, 0.0, 0.0]))
    assert np.abs(gs.projector @ gs.projector - gs.projector).max() < 1e-10


def test_gating_examples():
    beta = 1.2
    p = MixtureParams(np.array([[beta, 0.0], [-beta, 0.0]]))
    gs = gating_state(p)
    phi = gating_features(np.zeros((1, 2)), p.centers, gs).reshape(2, 2)
    assert np.allclose(phi[:, 1], [0.5, 0.5])
    phi = gating_features(p.centers[:1], p.centers, gs).reshape(2, 2)
    assert phi[0, 1] == pytest.approx(1.0 / (1.0 + np.exp(-2 * beta**2)), rel=1e-12)


def test_gating_responsibilities_sum_to_one(rng):
    p = MixtureParams.simplex(4, 6, 2.0)
    gs = gating_state(p)
    x = rng.standard_normal((1000, 6)) * 3
    phi = gating_features(x, p.centers, gs).reshape(1000, 4, gs.r_star + 1)
    assert phi.shape[1:] == (4, gs.r_star + 1) and feature_dim(4, gs.r_star) == 4 * (gs.r_star + 1)
    assert np.abs(phi[:, :, -1].sum(axis=1) - 1).max() < 1e-12


def test_gating_out_of_chart():
    p = MixtureParams(np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 0.5]]))
    gs = gating_state(p, r_star=1)
    rotated = np.array([[0.0, 1.0], [0.0, -1.0], [0.5, 0.0]])
    with pytest.raises(OutOfChartError):
        gs.moved(rotated)


def test_permutation_equivariance(rng):
    p = MixtureParams.simplex(4, 5, 2.0).canonical()
    x = sample_mixture(p, 200, rng)
    gs = gating_state(p)
    for _ in range(20):
        assert permutation_equivariance_gap(x, p, rng.permutation(4), gs) < 1e-12


def test_gating_orbit_invariance(rng):
    p = MixtureParams.simplex(3, 4, 2.0).canonical()
    gs = gating_state(p)
    x = sample_mixture(p, 100, rng)
    y = rng.standard_normal(100)
    probe = sample_mixture(p, 256, np.random.default_rng(99))
    fmap = lambda xs, U: gating_features(xs, U, gs)
    for _ in range(20):
        perm = rng.permutation(3)
        assert orbit_invariance_check(fmap, p.centers, lambda U: U[perm], x, y, probe)


# ---------------------------------------------------------------- Fisher information


def test_fisher_hard_assignment_limit():
    p = MixtureParams.simplex(3, 3, 10.0)
    F = fisher_information(p, 100_000, np.random.default_rng(0))
    assert np.abs(F - np.eye(9) / 3).max() < 0.05 / 3


def test_fisher_psd_random_configs(rng):
    for _ in range(10):
        p = MixtureParams(rng.standard_normal((3, 2)) * 2)
        F = fisher_information(p, 10_000, rng)
        assert np.allclose(F, F.T) and np.linalg.eigvalsh(F)[0] > -1e-8


def test_fisher_budget_floor():
    with pytest.raises(InputError):
        fisher_information(MixtureParams.simplex(2, 2, 1.0), 100, np.random.default_rng(0))


def test_fisher_error_shrinks_with_budget():
    p = MixtureParams.simplex(2, 2, 1.5)
    ref = fisher_information(p, 10_000_000, np.random.default_rng(123))
    dev = {N: [] for N in (10_000, 20_000)}
    for s in range(30):
        for N in dev:
            dev[N].append(np.linalg.norm(fisher_information(p, N, np.random.default_rng([s, N])) - ref))
    ratio = np.mean(dev[20_000]) / np.mean(dev[10_000])
    assert 0.5 <= ratio <= 0.9


# ---------------------------------------------------------------- interaction term


def test_signal_preset_unit_norm():
    s = SignalSpec.block_preset(4, 3)
    assert abs(np.linalg.norm(s.vector()) - 1) < 1e-12
    assert s.vector().size == 4 * 4


def test_zero_signal_gives_zero():
    p = MixtureParams.simplex(2, 3, 2.0).canonical()
    est = interaction_term_mc(p, SignalSpec(np.zeros((2, 1)), np.zeros(2)), SMALL)
    assert abs(est.value) < 1e-12


def test_signal_shape_checked():
    p = MixtureParams.simplex(3, 3, 2.0).canonical()
    with pytest.raises(InputError):
        interaction_term_mc(p, SignalSpec.block_preset(3, 1), SMALL)


def test_interaction_step_invariance():
    p = MixtureParams.simplex(2, 4, 2.0).canonical()
    sig = SignalSpec.block_preset(2, 1)
    ests = [interaction_term_mc(p, sig, InteractionConfig(20_000, 100_000, 100_000, h, 10, 0)) for h in (5e-4, 1e-3, 2e-3)]
    for a in ests:
        for b in ests:
            assert abs(a.value - b.value) <= 2 * max(a.se, b.se)


def test_interaction_reproducible():
    p = MixtureParams.simplex(2, 3, 2.0).canonical()
    sig = SignalSpec.block_preset(2, 1)
    assert interaction_term_mc(p, sig, SMALL) == interaction_term_mc(p, sig, SMALL)


def test_interaction_scales_quadratically_in_signal():
    p = MixtureParams.simplex(3, 4, 2.0).canonical()
    sig = SignalSpec.block_preset(3, 2)
    double = SignalSpec(2 * sig.theta, 2 * sig.offset)
    a, b = interaction_term_mc(p, sig, SMALL), interaction_term_mc(p, double, SMALL)
    assert b.value == pytest.approx(4 * a.value, rel=1e-9)


def hypot_se(a, b) -> float:
    return float(np.hypot(a.se, b.se))


def _value(K, d, beta, cfg=SMALL):
    p = MixtureParams.simplex(K, d, beta).canonical()
    return interaction_term_mc(p, SignalSpec.block_preset(K, gating_state(p).r_star), cfg)


def test_more_components_raise_interaction_wide():
    lo, hi = _value(2, 30, 2.0), _value(4, 30, 2.0)
    assert hi.value - lo.value > hypot_se(lo, hi)


def test_separation_lowers_interaction_wide():
    near, far = _value(4, 20, 1.5), _value(4, 20, 2.5)
    assert near.value - far.value > hypot_se(near, far)


def test_reduced_budget_trends():
    # reduced budgets with the one-standard-error bar
    cfg = InteractionConfig(10_000, 100_000, 100_000, seed=1)
    ks = [_value(K, 10, 2.0, cfg) for K in (2, 3, 4)]
    bs = [_value(4, 10, b, cfg) for b in (1.5, 2.0, 2.5)]
    for a, b in zip(ks, ks[1:]):
        assert b.value - a.value > hypot_se(a, b)
    for a, b in zip(bs, bs[1:]):
        assert a.value - b.value > hypot_se(a, b)


def test_ambiguous_alignment_silent_when_clear():
    ref = MixtureParams(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        align_to_reference(np.array([[0.9, 0.1], [-1.1, 0.0]]), ref)
