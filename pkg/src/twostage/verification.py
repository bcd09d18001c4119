"""Oracle and invariant checks run by ``twostage verify``.

Each check is cheap (seconds) and deterministic; the heavy statistical
reproductions live in the test-suite.
"""

from __future__ import annotations

import contextlib
import io
import os
import tempfile
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _pykernels, kernels
from .downstream import hat_matrix, linear_gaussian_moments, orbit_invariance_check, risk_decompose, DesignBlock
from .factor_model import (
    FactorPopulation,
    factor_limit_law_exact,
    factor_limit_law_numeric,
    factor_section,
    feature_matrix,
    ppca_mle,
    sample_factor,
)
from .linalg import pinv, pinv_derivative, spectral_projector_derivative, symmetrize
from .mog_model import MixtureParams, gating_features, gating_state, mixture_score_hessian, sample_mixture
from .spectral_model import SpectralPopulation, sample_triplets, score_covariance, score_functional, spectral_loss


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


CHECKS: list[tuple[str, Callable[[], tuple[bool, str]]]] = []


def check(name: str):
    def register(fn):
        CHECKS.append((name, fn))
        return fn

    return register


def _rng(tag: int) -> np.random.Generator:
    return np.random.default_rng(0xC0FFEE + tag)


def _random_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((k, k)))
    return Q * np.sign(np.diag(R))


def _gapped_psd(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    Q = _random_orthogonal(d, rng)
    vals = np.concatenate([1.0 + rng.random(k), 0.3 * rng.random(d - k)])
    return symmetrize((Q * vals) @ Q.T)


@check("penrose identities")
def _penrose():
    rng = _rng(1)
    worst = 0.0
    for _ in range(20):
        d, r = 6, int(rng.integers(1, 6))
        B = rng.standard_normal((d, r))
        A = symmetrize(B @ B.T)
        P = pinv(A)
        errs = [A @ P @ A - A, P @ A @ P - P, (A @ P).T - A @ P, (P @ A).T - P @ A]
        worst = max(worst, max(np.abs(e).max() for e in errs) / max(1.0, np.abs(A).max()))
    return worst < 1e-10, f"max residual {worst:.2e}"


@check("pinv derivative vs central differences")
def _pinv_fd():
    rng = _rng(2)
    worst = 0.0
    for _ in range(20):
        A = _gapped_psd(5, 5, rng)
        H = symmetrize(rng.standard_normal((5, 5)))
        h = 1e-4
        fd = (pinv(A + h * H) - pinv(A - h * H)) / (2 * h)
        worst = max(worst, np.abs(fd - pinv_derivative(A, H)).max())
    return worst < 1e-6, f"max abs error {worst:.2e}"


@check("projector derivative vs central differences")
def _proj_fd():
    from .linalg import top_k_projector

    rng = _rng(3)
    worst = 0.0
    for _ in range(20):
        B = _gapped_psd(5, 2, rng)
        E = symmetrize(rng.standard_normal((5, 5)))
        h = 1e-4
        fd = (top_k_projector(B + h * E, 2) - top_k_projector(B - h * E, 2)) / (2 * h)
        worst = max(worst, np.abs(fd - spectral_projector_derivative(B, E, 2)).max())
    return worst < 1e-6, f"max abs error {worst:.2e}"


@check("hat matrix idempotent, symmetric, trace = rank")
def _hat():
    rng = _rng(4)
    worst = 0.0
    for _ in range(10):
        n, p = 30, 6
        X = rng.standard_normal((n, 4)) @ rng.standard_normal((4, p))
        H = hat_matrix(X)
        worst = max(worst, np.abs(H @ H - H).max(), np.abs(H - H.T).max(), abs(np.trace(H) - 4))
    return worst < 1e-10, f"max defect {worst:.2e}"


def _spectral_pop() -> SpectralPopulation:
    return SpectralPopulation.diagonal(np.ones(5), 1.0 / np.arange(1, 6), 2)


def _factor_pop() -> FactorPopulation:
    return FactorPopulation.orthogonal(6, [2.0, 1.0], [1.0, 1.0])


@check("representation term vanishes at the population descriptor")
def _rep_zero():
    rng = _rng(5)
    sp = _spectral_pop()
    x = rng.standard_normal((200, sp.d))
    mom = linear_gaussian_moments(sp.a_star, sp.sigma_down, sp.w_star)
    r1 = risk_decompose(DesignBlock.from_matrix(x, x @ sp.a_star.T), x @ sp.w_star, mom, 1.0).rep
    fp = _factor_pop()
    W = feature_matrix(factor_section(fp, fp.m_star))
    xf = sample_factor(fp, 200, rng)
    momf = linear_gaussian_moments(W, fp.sigma_x, fp.w_star)
    r2 = risk_decompose(DesignBlock.from_matrix(xf, xf @ W.T), xf @ fp.w_star, momf, fp.sigma2).rep
    return max(r1, r2) <= 1e-10, f"spectral {r1:.2e}, factor {r2:.2e}"


@check("spectral loss invariant under O(k)")
def _loss_inv():
    rng = _rng(6)
    sp = _spectral_pop()
    batch = sample_triplets(sp, 500, rng)
    A = rng.standard_normal((2, 5))
    base = spectral_loss(A, batch)
    worst = max(abs(spectral_loss(_random_orthogonal(2, rng) @ A, batch) - base) for _ in range(20))
    return worst <= 1e-10 * max(1.0, abs(base)), f"max change {worst:.2e}"


@check("orbit invariance: spectral features under O(k)")
def _orbit_spectral():
    rng = _rng(7)
    sp = _spectral_pop()
    x = rng.standard_normal((60, 5))
    y = x @ sp.w_star + rng.standard_normal(60)
    probe = rng.standard_normal((40, 5))
    A = rng.standard_normal((2, 5))
    ok = all(
        orbit_invariance_check(lambda z, B: z @ B.T, A, lambda B, Q=_random_orthogonal(2, rng): Q @ B, x, y, probe)
        for _ in range(20)
    )
    return ok, "20 random rotations"


@check("orbit invariance: factor features under O(k)")
def _orbit_factor():
    rng = _rng(8)
    fp = _factor_pop()
    x, y = sample_factor(fp, 60, rng, with_labels=True)
    probe = sample_factor(fp, 40, rng)
    A = rng.standard_normal((6, 2))
    ok = all(
        orbit_invariance_check(lambda z, B: z @ feature_matrix(B).T, A, lambda B, Q=_random_orthogonal(2, rng): B @ Q, x, y, probe)
        for _ in range(20)
    )
    return ok, "20 random rotations"


@check("orbit invariance: gating features under relabeling")
def _orbit_mog():
    rng = _rng(9)
    params = MixtureParams.simplex(4, 6, 2.0)
    state = gating_state(params)
    x = sample_mixture(params, 120, rng)
    y = rng.standard_normal(120)
    probe = sample_mixture(params, 50, rng)
    fmap = lambda z, U: gating_features(z, U, state)  # noqa: E731
    ok = all(
        orbit_invariance_check(fmap, params.centers, lambda U, p=rng.permutation(4): U[p], x, y, probe)
        for _ in range(20)
    )
    return ok, "20 random permutations"


@check("responsibilities sum to one")
def _resp():
    rng = _rng(10)
    params = MixtureParams.simplex(4, 6, 2.0)
    x = 3.0 * rng.standard_normal((1000, 6))
    pi = kernels.mixture_responsibilities(x, params.centers)
    phi = gating_features(x, params.centers, gating_state(params)).reshape(1000, 4, -1)
    worst = max(np.abs(pi.sum(axis=1) - 1).max(), np.abs(phi[:, :, -1].sum(axis=1) - 1).max())
    return worst <= 1e-12, f"max deviation {worst:.2e}"


@check("mixture score and Hessian vs finite differences")
def _score_fd():
    from .mog_model import mixture_log_likelihood

    rng = _rng(11)
    worst_g = worst_h = 0.0
    for _ in range(5):
        U = rng.standard_normal((3, 3))
        x = rng.standard_normal(3)
        g, H = mixture_score_hessian(U, x)
        h = 1e-5
        fd_g = np.empty(U.size)
        fd_h = np.empty((U.size, U.size))
        for a in range(U.size):
            E = np.zeros(U.size)
            E[a] = h
            up, dn = U + E.reshape(U.shape), U - E.reshape(U.shape)
            fd_g[a] = -(mixture_log_likelihood(x[None], up) - mixture_log_likelihood(x[None], dn)) / (2 * h)
            fd_h[:, a] = (mixture_score_hessian(up, x)[0] - mixture_score_hessian(dn, x)[0]).ravel() / (2 * h)
        worst_g = max(worst_g, np.abs(fd_g - g.ravel()).max())
        worst_h = max(worst_h, np.abs(fd_h - H).max())
    return worst_g < 1e-7 and worst_h < 1e-6, f"gradient {worst_g:.2e}, Hessian {worst_h:.2e}"


@check("PPCA fixed point and Woodbury feature identity")
def _ppca():
    rng = _rng(15)
    worst = 0.0
    for _ in range(10):
        pop = FactorPopulation(rng.standard_normal((5, 2)), rng.standard_normal(2))
        worst = max(worst, np.abs(ppca_mle(pop.sigma_x, 2).matrix - pop.m_star).max())
        A = pop.a_star
        direct = A.T @ np.linalg.inv(np.eye(5) + A @ A.T)
        worst = max(worst, np.abs(feature_matrix(A) - direct).max())
    return worst < 1e-10, f"max deviation {worst:.2e}"


@check("factor law: closed form equals numeric projector derivative")
def _factor_law():
    rng = _rng(12)
    worst = 0.0
    for _ in range(5):
        A = rng.standard_normal((5, 2))
        pop = FactorPopulation(A, rng.standard_normal(2))
        w1 = factor_limit_law_exact(pop, 1.5).interaction_mean
        w2 = factor_limit_law_numeric(pop, 1.5).interaction_mean
        worst = max(worst, abs(w1 - w2) / max(w1, 1e-12))
    return worst < 1e-8, f"max relative gap {worst:.2e}"


@check("score covariance closed form vs Monte Carlo (1e5 triplets)")
def _score_cov():
    rng = _rng(13)
    sp = SpectralPopulation.diagonal(np.ones(4), [1.0, 0.6, 0.3, 0.1], 2)
    batch = sample_triplets(sp, 100_000, rng)
    H1 = symmetrize(rng.standard_normal((4, 4)))
    H2 = H1 + 0.5 * symmetrize(rng.standard_normal((4, 4)))
    s1 = score_functional(H1, batch, sp.m_star)
    s2 = score_functional(H2, batch, sp.m_star)
    mc = float(np.cov(s1, s2)[0, 1])
    exact = score_covariance(H1, H2, sp)
    rel = abs(mc - exact) / abs(exact)
    return rel < 0.05, f"relative error {rel:.3f}"


@check("kernel backends agree")
def _backends():
    rng = _rng(14)
    if kernels.BACKEND != "compiled":
        return True, "compiled backend not built; python only"
    comp = kernels.get_backend("compiled")
    x = rng.standard_normal((500, 4))
    U = rng.standard_normal((3, 4))
    T = rng.standard_normal((2, 4))
    g = rng.standard_normal(500)
    diffs = [
        np.abs(comp.mixture_responsibilities(x, U) - _pykernels.mixture_responsibilities(x, U)).max(),
        np.abs(comp.fisher_moment(x, U) - _pykernels.fisher_moment(x, U)).max(),
        np.abs(comp.pair_fourth_moment(x, x[::-1]) - _pykernels.pair_fourth_moment(x, x[::-1])).max(),
        np.abs(comp.gating_moments(x, U, T, g)[0] - _pykernels.gating_moments(x, U, T, g)[0]).max(),
    ]
    return max(diffs) < 1e-10, f"max difference {max(diffs):.2e}"


@check("seed determinism: simulate CSV byte-identical")
def _determinism():
    from .cli import main

    cfg = "[model]\nmodel = factor\nd = 4\nk = 1\nloadings = 1.5\n[sizes]\nn = 200\nreps = 8\n[signal]\nbeta_star = 1\n"
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.cfg")
        with open(path, "w") as fh:
            fh.write(cfg)
        outs = []
        for i in range(2):
            out = os.path.join(tmp, f"s{i}.csv")
            with contextlib.redirect_stdout(io.StringIO()):
                code = main(["simulate", "--config", path, "--out", out, "--seed", "11"])
            with open(out, "rb") as fh:
                outs.append((code, fh.read()))
    same = outs[0] == outs[1] and outs[0][0] == 0
    return same, "two runs identical" if same else "outputs differ"


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    results = []
    for name, fn in CHECKS:
        if names is not None and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail))
    return results
