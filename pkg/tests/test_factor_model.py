from __future__ import annotations

import numpy as np
import pytest

from conftest import random_orthogonal
from twostage.downstream import min_norm_ols, orbit_invariance_check, probe_grid
from twostage.errors import InputError
from twostage.factor_model import (
    FactorPopulation,
    factor_features,
    factor_limit_law,
    factor_limit_law_exact,
    factor_limit_law_numeric,
    factor_section,
    feature_matrix,
    fluctuation_sample,
    interaction_norm,
    interaction_norm_exact,
    ppca_mle,
    sample_factor,
)
from twostage.harness import FactorExperiment, run_two_stage
from twostage.linalg import symmetrize


def _random_pop(rng, d=5, k=2, beta=None):
    A = rng.standard_normal((d, k)) * 1.5
    beta = rng.standard_normal(k) if beta is None else beta
    return FactorPopulation(A, beta, 0.8)


# ---------------------------------------------------------------- population and sampling


def test_population_validation():
    with pytest.raises(InputError):
        FactorPopulation(np.ones((2, 2)), [1.0, 1.0])
    with pytest.raises(InputError):
        FactorPopulation(np.ones((3, 1)), [1.0, 1.0])


def test_noise_variance_is_conditional_variance(rng):
    pop = _random_pop(rng)
    # Var(beta^T h | x) from the joint Gaussian (h, x)
    A, b = pop.a_star, pop.beta_star
    cond = np.eye(pop.k) - A.T @ np.linalg.solve(pop.sigma_x, A)
    assert pop.sigma2 == pytest.approx(pop.sigma_nu**2 + b @ cond @ b, rel=1e-12)


def test_sample_moments(rng):
    pop = _random_pop(rng)
    x, y = sample_factor(pop, 100_000, rng, with_labels=True)
    S = x.T @ x / len(x)
    assert np.linalg.norm(S - pop.sigma_x, 2) < 0.03 * np.linalg.norm(pop.sigma_x, 2)
    assert np.var(y - x @ pop.w_star) == pytest.approx(pop.sigma2, rel=0.03)


def test_zero_signal_labels_uncorrelated(rng):
    pop = FactorPopulation.orthogonal(4, [2.0, 1.0], [0.0, 0.0])
    x, y = sample_factor(pop, 20_000, rng, with_labels=True)
    phi = factor_features(x, pop.a_star)
    for j in range(phi.shape[1]):
        r = np.corrcoef(phi[:, j], y)[0, 1]
        assert abs(r) < 3 / np.sqrt(len(y))


# ---------------------------------------------------------------- PPCA


def test_ppca_example():
    u = np.array([1.0, 1.0]) / np.sqrt(2)
    v = np.array([1.0, -1.0]) / np.sqrt(2)
    S = 3 * np.outer(u, u) + 0.5 * np.outer(v, v)
    assert np.allclose(ppca_mle(S, 1).matrix, 2 * np.outer(u, u))


def test_ppca_clips_to_zero():
    D = ppca_mle(np.diag([1.0, 0.5, 0.2]), 2)
    assert np.array_equal(D.matrix, np.zeros((3, 3))) and D.rank == 0


def test_ppca_population_fixed_point(rng):
    pop = _random_pop(rng)
    assert np.abs(ppca_mle(pop.sigma_x, pop.k).matrix - pop.m_star).max() < 1e-10


def test_ppca_error_slope():
    pop = FactorPopulation.orthogonal(6, [2.0, 1.0], [1.0, 1.0])
    ms = np.array([1_000, 10_000, 100_000])
    errs = []
    for m in ms:
        e = []
        for r in range(50):
            x = sample_factor(pop, int(m), np.random.default_rng([5, int(m), r]))
            e.append(np.linalg.norm(ppca_mle(x.T @ x / m, 2).matrix - pop.m_star))
        errs.append(np.mean(e))
    slope = np.polyfit(np.log(ms), np.log(errs), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_ppca_fluctuation_block_variances():
    # sqrt(m)(M_hat - M_star) against the pushforward Z = PG + GP - PGP, block by block
    pop = FactorPopulation.orthogonal(5, [2.0, 1.0], [1.0, 1.0])
    U = np.column_stack(pop.eigensplit()[:2])
    m, reps = 100_000, 500
    emp = []
    for r in range(reps):
        x = sample_factor(pop, m, np.random.default_rng([77, r]))
        D = np.sqrt(m) * (ppca_mle(x.T @ x / m, 2).matrix - pop.m_star)
        emp.append(U.T @ D @ U)
    rng = np.random.default_rng(78)
    ref = [U.T @ fluctuation_sample(pop, rng) @ U for _ in range(20_000)]
    ve, vr = np.var(emp, axis=0), np.var(ref, axis=0)
    for block in (np.s_[:2, :2], np.s_[:2, 2:]):
        assert ve[block].mean() == pytest.approx(vr[block].mean(), rel=0.15)


# ---------------------------------------------------------------- features


def test_feature_examples(rng):
    A = np.array([[1.0], [0.0]])
    assert factor_features(np.array([[1.0, 0.0]]), A)[0, 0] == pytest.approx(0.5)
    assert factor_features(np.array([[0.0, 3.0]]), A)[0, 0] == 0.0
    A = rng.standard_normal((6, 3))
    woodbury = A.T @ np.linalg.inv(np.eye(6) + A @ A.T)
    assert np.abs(feature_matrix(A) - woodbury).max() < 1e-12


def test_feature_orbit_invariance(rng):
    pop = _random_pop(rng, d=6, k=3)
    x, y = sample_factor(pop, 60, rng, with_labels=True)
    probe = probe_grid(lambda g, s: sample_factor(pop, s, g))
    fmap = lambda xs, A: factor_features(xs, A)
    for _ in range(20):
        Q = random_orthogonal(3, rng)
        assert orbit_invariance_check(fmap, pop.a_star, lambda A: A @ Q, x, y, probe)


def test_section_reproduces_descriptor(rng):
    pop = _random_pop(rng)
    F = factor_section(pop, pop.m_star)
    assert F.shape == (pop.d, pop.k)
    assert np.abs(F @ F.T - pop.m_star).max() < 1e-10


def test_rep_vanishes_at_truth(rng):
    pop = _random_pop(rng)
    W = feature_matrix(factor_section(pop, pop.m_star))
    x = sample_factor(pop, 5000, rng)
    theta = min_norm_ols(x @ W.T, x @ pop.w_star)
    assert np.abs(x @ W.T @ theta - x @ pop.w_star).max() < 1e-9


# ---------------------------------------------------------------- limit laws


def test_law_small_example():
    pop = FactorPopulation.orthogonal(2, [1.0], [1.0])
    for alpha in (0.5, 1.0, 3.0):
        law = factor_limit_law(pop, alpha)
        assert law.components == ((pytest.approx(1 / (2 * alpha)), 1),)
        assert law.constant == pytest.approx(pop.sigma2)


def test_law_zero_signal():
    pop = FactorPopulation.orthogonal(4, [2.0, 1.0], [0.0, 0.0])
    law = factor_limit_law(pop, 2.0)
    assert law.components == () and law.mean() == pytest.approx(pop.sigma2 * 2)


def test_law_weight_monte_carlo(rng):
    pop = _random_pop(rng, d=6, k=2)
    U1, _, sig = pop.eigensplit()
    v = (U1.T @ pop.a_star @ pop.beta_star) / np.sqrt(1 + sig)
    alpha, dk = 1.7, pop.d - pop.k
    xi = rng.standard_normal((200_000, dk, pop.k))
    mc = np.mean(np.sum((xi @ v) ** 2, axis=1)) / (alpha * dk)
    assert factor_limit_law(pop, alpha).components[0][0] == pytest.approx(mc, rel=0.02)


def test_fluctuation_tangent_and_centered(rng):
    pop = _random_pop(rng)
    _, U2, _ = pop.eigensplit()
    Zs = np.array([fluctuation_sample(pop, rng) for _ in range(10_000)])
    assert np.abs(U2.T @ Zs[0] @ U2).max() < 1e-10
    mean = Zs.mean(axis=0)
    se = Zs.std(axis=0) / np.sqrt(len(Zs))
    assert np.all(np.abs(mean) <= 3.5 * se + 1e-12)


def test_fluctuation_pipeline_matches_closed_form():
    pop = FactorPopulation.orthogonal(6, [2.0, 1.0], [1.0, 1.0])
    rng = np.random.default_rng(6)
    vals = [interaction_norm(pop, fluctuation_sample(pop, rng)) for _ in range(10_000)]
    law = factor_limit_law(pop, 1.0)
    assert np.mean(vals) == pytest.approx(law.interaction_mean, rel=0.05)


def test_exact_pipeline_matches_exact_law():
    pop = FactorPopulation.orthogonal(6, [2.0, 1.0], [1.0, 1.0])
    rng = np.random.default_rng(7)
    vals = [interaction_norm_exact(pop, fluctuation_sample(pop, rng)) for _ in range(10_000)]
    law = factor_limit_law_exact(pop, 1.0)
    assert np.mean(vals) == pytest.approx(law.interaction_mean, rel=0.05)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_exact_law_equals_numeric_assembly(seed):
    pop = _random_pop(np.random.default_rng(seed), d=5, k=2)
    exact = factor_limit_law_exact(pop, 2.0)
    numeric = factor_limit_law_numeric(pop, 2.0)
    assert numeric.mean() == pytest.approx(exact.mean(), rel=1e-8)
    assert numeric.variance() == pytest.approx(exact.variance(), rel=1e-8)


def test_exact_law_drops_below_closed_form_for_strong_loadings():
    # 1 / sigma_i^2 < 1 when sigma_i > 1, so the rotation term shrinks the weight
    pop = FactorPopulation.orthogonal(6, [2.0, 1.5], [1.0, 1.0])
    assert factor_limit_law_exact(pop, 1.0).mean() < factor_limit_law(pop, 1.0).mean()


def test_simulation_matches_exact_law():
    pop = FactorPopulation.orthogonal(4, [1.5], [1.0])
    n, alpha = 2000, 2.0
    sample = run_two_stage(FactorExperiment(pop), int(alpha * n), n, 300, base_seed=3, workers=1)
    law = factor_limit_law_exact(pop, alpha)
    se = sample.values.std() / np.sqrt(len(sample))
    assert abs(sample.values.mean() - law.mean()) < max(3 * se, 0.05 * law.mean())


def test_tangent_fluctuation_symmetric(rng):
    pop = _random_pop(rng)
    Z = fluctuation_sample(pop, rng)
    assert np.array_equal(Z, symmetrize(Z))
