"""Linear spectral contrastive pre-training.

Triplets (x, x+, x-) are Gaussian: (x, x+) jointly with covariance blocks
(Sigma_pre, Sigma_pre_plus) and x- an independent copy of x. The representation
is A in R^{k x d}, the loss is -2<Ax, Ax+> + <Ax, Ax->^2, and the orbit-invariant
descriptor is M = A^T A.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import kernels
from .downstream import interaction_weights
from .errors import EigengapError, InputError, ModelError, NonConvergenceError, OutOfChartError
from .laws import LimitLaw
from .linalg import (
    GAP_TOL,
    Descriptor,
    as_symmetric,
    eigengap,
    local_section,
    pinv,
    psd_sqrt,
    rank_k_truncate_psd,
    sym_eig,
    symmetrize,
    tangent_basis,
)


def _whitened(sigma_pre: np.ndarray, sigma_plus: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    root = psd_sqrt(sigma_pre)
    iroot = psd_sqrt(sigma_pre, inverse=True)
    return symmetrize(iroot @ sigma_plus @ iroot), root, iroot


def _target_matrix(sigma_pre, sigma_plus, k: int, gap_tol: float = GAP_TOL) -> np.ndarray:
    C, _, iroot = _whitened(sigma_pre, sigma_plus)
    vals = sym_eig(C).values
    gap = vals[k - 1] - max(vals[k], 0.0) if k < len(vals) else vals[k - 1]
    if gap <= gap_tol:
        raise EigengapError(f"whitened cross-covariance has eigengap {gap:.3e} at k={k}")
    D = rank_k_truncate_psd(C, k)
    return symmetrize(iroot @ D.matrix @ iroot)


@dataclass(frozen=True)
class SpectralPopulation:
    sigma_pre: np.ndarray
    sigma_plus: np.ndarray
    k: int
    sigma_down: np.ndarray
    a_star: np.ndarray
    beta_star: np.ndarray
    m_star: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        S = as_symmetric(self.sigma_pre, "sigma_pre")
        Sp = as_symmetric(self.sigma_plus, "sigma_plus")
        Sd = as_symmetric(self.sigma_down, "sigma_down")
        d = S.shape[0]
        if Sp.shape != S.shape or Sd.shape != S.shape:
            raise InputError("covariance shapes disagree")
        if not 1 <= self.k < d:
            raise InputError(f"need 1 <= k < d, got k={self.k}, d={d}")
        if np.linalg.eigvalsh(S)[0] <= 0 or np.linalg.eigvalsh(Sd)[0] <= 0:
            raise ModelError("sigma_pre and sigma_down must be positive definite")
        joint_min = np.linalg.eigvalsh(np.block([[S, Sp], [Sp, S]]))[0]
        if joint_min < -1e-10 * max(1.0, np.abs(S).max()):
            raise ModelError("joint covariance of (x, x+) is not PSD")
        M = _target_matrix(S, Sp, self.k)
        A = np.asarray(self.a_star, dtype=float)
        beta = np.asarray(self.beta_star, dtype=float)
        if A.shape != (self.k, d) or beta.shape != (self.k,):
            raise InputError("a_star must be k x d and beta_star length k")
        if np.max(np.abs(A.T @ A - M)) > 1e-8 * max(1.0, np.abs(M).max()):
            raise ModelError("a_star^T a_star does not match the population target")
        for name, val in (("sigma_pre", S), ("sigma_plus", Sp), ("sigma_down", Sd), ("a_star", A), ("beta_star", beta)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "m_star", M)

    @property
    def d(self) -> int:
        return self.sigma_pre.shape[0]

    @property
    def w_star(self) -> np.ndarray:
        """Coefficient of the regression function f(x) = beta^T A x."""
        return self.a_star.T @ self.beta_star

    @property
    def whitened_cross(self) -> np.ndarray:
        return _whitened(self.sigma_pre, self.sigma_plus)[0]

    def anchor(self) -> np.ndarray:
        return sym_eig(self.m_star).vectors[:, : self.k]

    @classmethod
    def from_matrices(cls, sigma_pre, sigma_plus, k, sigma_down=None, beta_star=None) -> "SpectralPopulation":
        sigma_pre = as_symmetric(sigma_pre, "sigma_pre")
        d = sigma_pre.shape[0]
        M = _target_matrix(sigma_pre, as_symmetric(sigma_plus, "sigma_plus"), k)
        anchor = sym_eig(M).vectors[:, :k]
        A = local_section(M, anchor)
        beta = np.ones(k) if beta_star is None else np.asarray(beta_star, float)
        sd = np.eye(d) if sigma_down is None else sigma_down
        return cls(sigma_pre, sigma_plus, k, sd, A, beta)

    @classmethod
    def diagonal(cls, pre_diag, plus_diag, k, beta_star=None, sigma_down=None) -> "SpectralPopulation":
        return cls.from_matrices(np.diag(pre_diag), np.diag(plus_diag), k, sigma_down, beta_star)

    @classmethod
    def concrete(cls, d: int, k: int) -> "SpectralPopulation":
        """Sigma_pre = I, Sigma_pre_plus = diag(1, 1/2, ..., 1/d), beta = 1, downstream N(0, I)."""
        if not 1 <= k < d:
            raise InputError(f"need 1 <= k < d, got k={k}, d={d}")
        lam = 1.0 / np.arange(1, d + 1)
        A = np.zeros((k, d))
        A[:, :k] = np.diag(np.sqrt(lam[:k]))
        return cls(np.eye(d), np.diag(lam), k, np.eye(d), A, np.ones(k))


@dataclass(frozen=True)
class TripletBatch:
    x: np.ndarray
    x_pos: np.ndarray
    x_neg: np.ndarray

    @property
    def m(self) -> int:
        return self.x.shape[0]


def _gaussian_factor(S: np.ndarray) -> np.ndarray:
    """Left factor L with L L^T = S; eigen-based when S is PSD but singular."""
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(symmetrize(S))
        if vals[0] < -1e-10 * max(1.0, abs(vals[-1])):
            raise ModelError("covariance is not PSD") from None
        return vecs * np.sqrt(np.maximum(vals, 0.0))


def sample_triplets(pop: SpectralPopulation, m: int, rng: np.random.Generator) -> TripletBatch:
    """Draw m triplets; x- comes from a child stream independent of the (x, x+) stream."""
    d = pop.d
    joint = np.block([[pop.sigma_pre, pop.sigma_plus], [pop.sigma_plus, pop.sigma_pre]])
    L = _gaussian_factor(joint)
    pos_rng, neg_rng = rng.spawn(2)
    xx = pos_rng.standard_normal((m, 2 * d)) @ L.T
    x_neg = neg_rng.standard_normal((m, d)) @ _gaussian_factor(pop.sigma_pre).T
    return TripletBatch(np.ascontiguousarray(xx[:, :d]), np.ascontiguousarray(xx[:, d:]), x_neg)


def spectral_loss(A: np.ndarray, batch: TripletBatch) -> float:
    """Mean per-triplet loss -2<Ax, Ax+> + <Ax, Ax->^2."""
    ax = batch.x @ A.T
    pos = np.sum(ax * (batch.x_pos @ A.T), axis=1)
    neg = np.sum(ax * (batch.x_neg @ A.T), axis=1)
    return float(np.mean(-2.0 * pos + neg * neg))


def population_loss(M: np.ndarray, pop: SpectralPopulation) -> float:
    MS = M @ pop.sigma_pre
    return float(-2.0 * np.sum(M * pop.sigma_plus) + np.trace(MS @ MS))


def population_gradient(M: np.ndarray, pop: SpectralPopulation) -> np.ndarray:
    """Euclidean gradient of the population loss in M."""
    S = pop.sigma_pre
    return symmetrize(-2.0 * pop.sigma_plus + 2.0 * S @ M @ S)


def population_target(pop: SpectralPopulation) -> Descriptor:
    return Descriptor(pop.m_star.copy(), pop.k)


@dataclass(frozen=True)
class FitOptions:
    grad_tol: float = 1e-7
    max_iters: int = 5000
    restarts: int = 3
    min_samples: int = 50
    armijo: float = 1e-4
    perturbation: float = 0.1
    seed: int = 0
    method: str = "bfgs"


@dataclass(frozen=True)
class FitResult:
    descriptor: Descriptor
    factor: np.ndarray
    loss: float
    grad_norm: float
    iterations: int


class _EmpiricalLoss:
    """Empirical loss as an exact quadratic in M = A^T A.

    loss(M) = -2 <M, K> + vec(M)^T T vec(M), K = sym(mean x x+^T) and
    T = mean vec(x x-^T) vec(x x-^T)^T, so one pass over the triplets suffices.
    """

    def __init__(self, batch: TripletBatch):
        m = batch.m
        self.d = batch.x.shape[1]
        self.K = symmetrize(batch.x.T @ batch.x_pos / m)
        self.T = kernels.pair_fourth_moment(batch.x, batch.x_neg)

    def value_grad(self, A: np.ndarray) -> tuple[float, np.ndarray]:
        M = A.T @ A
        v = M.reshape(-1)
        Tv = self.T @ v
        loss = -2.0 * float(np.sum(M * self.K)) + float(v @ Tv)
        G = -2.0 * self.K + 2.0 * Tv.reshape(self.d, self.d)
        return loss, A @ (G + G.T)

    def value(self, A: np.ndarray) -> float:
        M = A.T @ A
        v = M.reshape(-1)
        return -2.0 * float(np.sum(M * self.K)) + float(v @ self.T @ v)


def plug_in_start(batch: TripletBatch, k: int) -> np.ndarray:
    """Section of the rank-k truncation of the empirically whitened cross-covariance."""
    m = batch.m
    S = symmetrize(batch.x.T @ batch.x / m)
    Kp = symmetrize(batch.x.T @ batch.x_pos / m)
    iroot = psd_sqrt(S, inverse=True)
    D = rank_k_truncate_psd(iroot @ Kp @ iroot, k)
    M0 = symmetrize(iroot @ D.matrix @ iroot)
    anchor = sym_eig(M0).vectors[:, :k]
    try:
        return local_section(M0, anchor)
    except (OutOfChartError, InputError):
        vals = np.maximum(sym_eig(M0).values[:k], 0.0)
        return np.sqrt(vals)[:, None] * anchor.T


def _descend(obj: _EmpiricalLoss, A: np.ndarray, opts: FitOptions) -> tuple[np.ndarray, float, float, int, bool]:
    loss, g = obj.value_grad(A)
    step = 1.0
    for it in range(1, opts.max_iters + 1):
        gnorm2 = float(np.sum(g * g))
        if np.sqrt(gnorm2) <= opts.grad_tol * (1.0 + abs(loss)):
            return A, loss, np.sqrt(gnorm2), it - 1, True
        while True:
            cand = A - step * g
            cand_loss = obj.value(cand)
            if cand_loss <= loss - opts.armijo * step * gnorm2:
                break
            step *= 0.5
            if step < 1e-30:
                return A, loss, np.sqrt(gnorm2), it, False
        A = cand
        loss, g = obj.value_grad(A)
        step *= 2.0
    gnorm = float(np.linalg.norm(g))
    return A, loss, gnorm, opts.max_iters, gnorm <= opts.grad_tol * (1.0 + abs(loss))


def _quasi_newton(obj: _EmpiricalLoss, A: np.ndarray, opts: FitOptions) -> tuple[np.ndarray, float, float, int, bool]:
    """BFGS on vec(A); Armijo descent finishes the run if the tolerance is not yet met."""
    shape = A.shape

    def fun(a):
        loss, g = obj.value_grad(a.reshape(shape))
        return loss, g.ravel()

    res = minimize(fun, A.ravel(), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": opts.max_iters})
    A = res.x.reshape(shape)
    loss, g = obj.value_grad(A)
    gnorm = float(np.linalg.norm(g))
    if gnorm <= opts.grad_tol * (1.0 + abs(loss)):
        return A, loss, gnorm, int(res.nit), True
    A, loss, gnorm, it, ok = _descend(obj, A, opts)
    return A, loss, gnorm, int(res.nit) + it, ok


def fit_descriptor(batch: TripletBatch, k: int, opts: FitOptions = FitOptions()) -> FitResult:
    """Gradient-based descent on A from the plug-in start plus perturbed restarts.

    ``opts.method`` is "bfgs" (quasi-Newton directions) or "gd" (plain Armijo steps);
    both stop at ||grad_A|| <= grad_tol (1 + |loss|).
    """
    if opts.method not in ("bfgs", "gd"):
        raise InputError(f"unknown fit method {opts.method!r}")
    run = _quasi_newton if opts.method == "bfgs" else _descend
    if batch.m < opts.min_samples:
        raise InputError(f"need at least {opts.min_samples} triplets, got {batch.m}")
    obj = _EmpiricalLoss(batch)
    A0 = plug_in_start(batch, k)
    rng = np.random.default_rng(opts.seed)
    scale = opts.perturbation * max(np.linalg.norm(A0), 1e-3) / np.sqrt(A0.size)
    best = None
    norms = []
    for r in range(opts.restarts):
        start = A0 if r == 0 else A0 + scale * rng.standard_normal(A0.shape)
        A, loss, gnorm, iters, ok = run(obj, start, opts)
        norms.append(gnorm)
        if ok and (best is None or loss < best[1]):
            best = (A, loss, gnorm, iters)
    if best is None:
        raise NonConvergenceError("no restart reached the gradient tolerance", norms)
    A, loss, gnorm, iters = best
    M = symmetrize(A.T @ A)
    return FitResult(Descriptor(M, k), A, loss, gnorm, iters)


def score_functional(H: np.ndarray, batch: TripletBatch, m_star: np.ndarray) -> np.ndarray:
    """Per-triplet S_H = -2 x^T H x+ + 2 (x^T M x-)(x^T H x-)."""
    xH = batch.x @ H
    pos = np.sum(xH * batch.x_pos, axis=1)
    neg_h = np.sum(xH * batch.x_neg, axis=1)
    neg_m = np.sum((batch.x @ m_star) * batch.x_neg, axis=1)
    return -2.0 * pos + 2.0 * neg_m * neg_h


def _c_terms(H1, H2, S, Sp, M) -> float:
    """C_aa - C_ab(H1,H2) - C_ab(H2,H1) + C_bb for Gaussian triplets."""
    tr = np.trace
    c_aa = tr(H1 @ S @ H2 @ S) + tr(H1 @ Sp @ H2 @ Sp)
    P1, P2 = M @ S @ H1, M @ S @ H2
    c_ab12 = tr(P2 @ S @ H1 @ Sp) + tr(P2 @ Sp @ H1 @ S)
    c_ab21 = tr(P1 @ S @ H2 @ Sp) + tr(P1 @ Sp @ H2 @ S)
    Q = M @ S @ M
    c_bb = (
        tr(P1 @ S) * tr(P2 @ S)
        + 2.0 * tr(P1 @ S @ P2 @ S)
        + tr(H1 @ S @ H2 @ S) * tr(Q @ S)
        + 4.0 * tr(H1 @ S @ H2 @ S @ Q @ S)
    )
    return float(c_aa - c_ab12 - c_ab21 + c_bb)


def score_covariance(H1, H2, pop: SpectralPopulation, m_star: np.ndarray | None = None) -> float:
    """Cov(S_H1, S_H2) under the Gaussian triplet model."""
    M = pop.m_star if m_star is None else m_star
    return 4.0 * _c_terms(np.asarray(H1, float), np.asarray(H2, float), pop.sigma_pre, pop.sigma_plus, M)


def limit_covariance_form(H1, H2, pop: SpectralPopulation, m_star: np.ndarray | None = None) -> float:
    """<H1, V H2> with V = H^{-1} Cov H^{-1} for the ambient Hessian v -> 2 Sigma v Sigma."""
    M = pop.m_star if m_star is None else m_star
    Si = np.linalg.inv(pop.sigma_pre)
    H1p = Si @ np.asarray(H1, float) @ Si
    H2p = Si @ np.asarray(H2, float) @ Si
    return _c_terms(H1p, H2p, pop.sigma_pre, pop.sigma_plus, M)


def concrete_limit_law(d: int, k: int, alpha: float, sigma2: float) -> LimitLaw:
    """Closed-form law for the diagonal example with lambda_i = 1/i.

    constant sigma2 * k, one weight (2/alpha) sum_i i (1 + i^-2 + tau) with d - k dof.
    """
    if not 1 <= k < d:
        raise InputError(f"need 1 <= k < d, got k={k}, d={d}")
    if alpha <= 0:
        raise InputError("alpha must be positive")
    i = np.arange(1, k + 1, dtype=float)
    tau = float(np.sum(i**-2))
    weight = 2.0 / alpha * float(np.sum(i * (1.0 + i**-2 + tau)))
    return LimitLaw(sigma2 * k, ((weight, d - k),))


def spectral_limit_law(pop: SpectralPopulation, alpha: float, sigma2: float, hessian: str = "riemannian") -> LimitLaw:
    """Limit law computed numerically from the score covariance and the projector derivative.

    ``hessian="ambient"`` uses v -> 2 Sigma v Sigma restricted to the tangent space.
    ``hessian="riemannian"`` adds the curvature of the rank-k manifold,
    <grad L, v1 M^+ v2 + v2 M^+ v1>, which is nonzero whenever the whitened
    cross-covariance has eigenvalues below the top k.
    """
    if alpha <= 0:
        raise InputError("alpha must be positive")
    if hessian not in ("ambient", "riemannian"):
        raise InputError("hessian must be 'ambient' or 'riemannian'")
    es = sym_eig(pop.m_star)
    k = pop.k
    basis = tangent_basis(es.vectors[:, :k], es.vectors[:, k:])
    S = pop.sigma_pre
    n = len(basis)
    score = np.empty((n, n))
    hess = np.empty((n, n))
    grad = population_gradient(pop.m_star, pop)
    Mp = pinv(pop.m_star)
    for a in range(n):
        for b in range(a, n):
            score[a, b] = score[b, a] = score_covariance(basis[a], basis[b], pop)
            h = 2.0 * np.trace(basis[a] @ S @ basis[b] @ S)
            if hessian == "riemannian":
                h += np.sum(grad * (basis[a] @ Mp @ basis[b] + basis[b] @ Mp @ basis[a]))
            hess[a, b] = hess[b, a] = h
    hinv = np.linalg.inv(hess)
    cov = symmetrize(hinv @ score @ hinv)
    weights = interaction_weights(pop.m_star, pop.sigma_down, pop.w_star, basis, cov, k) / alpha
    return LimitLaw.from_weights(sigma2 * k, weights)


@dataclass(frozen=True)
class SuboptimalityReport:
    expected_q: float
    conditioning_factor: float
    prior_bound_scale: float


def suboptimality_report(d: int, k: int, lambdas, beta_star) -> SuboptimalityReport:
    """E[Q] for the diagonal model, the conditioning factor ||R^{-1/2} beta||^2 and their product."""
    lam = np.asarray(lambdas, dtype=float)
    beta = np.asarray(beta_star, dtype=float)
    if lam.shape != (k,) or beta.shape != (k,):
        raise InputError("lambdas and beta_star must have length k")
    if np.any(lam <= 0):
        raise InputError("lambdas must be positive")
    tau = float(np.sum(lam**2))
    eq = k * (4 * d - 2 * k - 1) * (1 + tau) + 2 * (2 * d - 1) * tau + 2 * float(np.sum(lam)) ** 2
    cond = float(np.sum(beta**2 / lam))
    return SuboptimalityReport(float(eq), cond, float(eq) * cond)


def expected_q_sum(d: int, k: int, lambdas) -> float:
    """E[Q] as the raw sum of chi-square means, before simplification."""
    lam = np.asarray(lambdas, dtype=float)
    tau = float(np.sum(lam**2))
    diag = float(np.sum(1 + tau + 3 * lam**2) + np.sum(lam**2))
    off = 0.0
    for i in range(k):
        for j in range(i + 1, k):
            off += 4 * (1 + tau + lam[i] ** 2 + lam[i] * lam[j] + lam[j] ** 2)
    cross = 4.0 * (d - k) * float(np.sum(1 + tau + lam**2))
    return diag + off + cross


def tangent_section(pop: SpectralPopulation, M: np.ndarray) -> np.ndarray:
    """k x d feature matrix s(M) anchored at the top-k eigenvectors of M_star."""
    return local_section(M, pop.anchor())


def check_eigengap(pop: SpectralPopulation) -> float:
    vals = sym_eig(pop.whitened_cross).values
    return float(vals[pop.k - 1] - max(vals[pop.k], 0.0))


__all__ = [
    "SpectralPopulation",
    "TripletBatch",
    "FitOptions",
    "FitResult",
    "sample_triplets",
    "spectral_loss",
    "population_loss",
    "population_gradient",
    "population_target",
    "fit_descriptor",
    "score_functional",
    "score_covariance",
    "limit_covariance_form",
    "concrete_limit_law",
    "spectral_limit_law",
    "suboptimality_report",
    "expected_q_sum",
    "eigengap",
]
