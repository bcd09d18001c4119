"""Minimum-norm OLS, projection operators and the conditional risk decomposition.

Features are evaluated on a fixed design; population quantities enter only through
second moments E[phi phi^T], the cross moment E[f phi] and E[f^2]. For Gaussian
covariates with linear features these are exact matrix algebra.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateDesignWarning, InputError
from .linalg import RANK_TOL, numerical_rank, pinv, psd_sqrt, spectral_projector_derivative, symmetrize

PROBE_SEED = 0x5EED_0256
PROBE_SIZE = 256


@dataclass(frozen=True)
class FeatureEvaluator:
    """Deterministic map x -> phi(x, Omega) applied row-wise to an (n, d) array."""

    evaluate: Callable[[np.ndarray], np.ndarray]
    dim: int
    params: object = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        phi = np.asarray(self.evaluate(np.atleast_2d(x)), dtype=float)
        if phi.shape[1] != self.dim:
            raise InputError(f"feature map returned {phi.shape[1]} columns, expected {self.dim}")
        return phi


@dataclass(frozen=True)
class DesignBlock:
    x: np.ndarray
    phi: np.ndarray
    sigma_n: np.ndarray = field(repr=False)

    @classmethod
    def from_features(cls, x: np.ndarray, features: FeatureEvaluator | Callable) -> "DesignBlock":
        x = np.asarray(x, dtype=float)
        return cls.from_matrix(x, features(x))

    @classmethod
    def from_matrix(cls, x: np.ndarray, phi: np.ndarray) -> "DesignBlock":
        phi = np.asarray(phi, dtype=float)
        if not np.all(np.isfinite(phi)):
            raise InputError("feature matrix has non-finite entries")
        sigma_n = symmetrize(phi.T @ phi / phi.shape[0])
        return cls(np.asarray(x), phi, sigma_n)

    @property
    def n(self) -> int:
        return self.phi.shape[0]


@dataclass(frozen=True)
class PopulationMoments:
    """E[phi phi^T], E[f phi] and E[f^2] under the downstream covariate law."""

    sigma: np.ndarray
    cross: np.ndarray
    target_sq: float
    n_mc: int | None = None


@dataclass(frozen=True)
class RiskBreakdown:
    sigma2: float
    rep: float
    leakage: float
    variance: float
    n: int
    well_posed: bool = True

    @property
    def total(self) -> float:
        return self.sigma2 + self.rep + self.leakage + self.variance

    @property
    def excess_scaled(self) -> float:
        return self.n * (self.rep + self.leakage + self.variance)


def min_norm_ols(phi: np.ndarray, y: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    """theta = Sigma_n^+ Phi^T y / n, the minimum-norm least-squares solution."""
    phi = np.asarray(phi, dtype=float)
    y = np.asarray(y, dtype=float)
    if not (np.all(np.isfinite(phi)) and np.all(np.isfinite(y))):
        raise InputError("design or response has non-finite entries")
    n = phi.shape[0]
    return pinv(phi.T @ phi / n, rank_tol) @ (phi.T @ y / n)


def hat_matrix(phi: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    return phi @ pinv(phi.T @ phi, rank_tol) @ phi.T


def effective_dimension(sigma, rank_tol: float = RANK_TOL) -> int:
    return numerical_rank(sigma, rank_tol)


def population_projector_linear(sigma, cross, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Coefficients of the L2 projection of g onto span(phi): Sigma^+ E[g phi]."""
    return pinv(sigma, rank_tol) @ np.asarray(cross, dtype=float)


def linear_gaussian_moments(W: np.ndarray, sigma_x: np.ndarray, w_star: np.ndarray) -> PopulationMoments:
    """Moments for phi = W x and f(x) = w_star^T x with x ~ N(0, sigma_x)."""
    W = np.atleast_2d(W)
    sw = sigma_x @ w_star
    return PopulationMoments(symmetrize(W @ sigma_x @ W.T), W @ sw, float(w_star @ sw))


def risk_decompose(
    design: DesignBlock,
    target: np.ndarray,
    moments: PopulationMoments,
    sigma2: float,
    rank_tol: float = RANK_TOL,
) -> RiskBreakdown:
    """Exact conditional risk decomposition R - sigma2 = Rep + Leakage + Var.

    ``target`` holds f_star at the design covariates. No labels are needed: the
    label noise is averaged analytically.
    """
    target = np.asarray(target, dtype=float)
    n = design.n
    if target.shape != (n,):
        raise InputError("target must hold one value per design row")
    sig_p = pinv(moments.sigma, rank_tol)
    theta_pop = sig_p @ moments.cross
    rep = max(moments.target_sq - float(moments.cross @ theta_pop), 0.0)

    sig_n_p = pinv(design.sigma_n, rank_tol)
    rank_pop = numerical_rank(moments.sigma, rank_tol)
    rank_emp = numerical_rank(design.sigma_n, rank_tol)
    if rank_emp > rank_pop:
        warnings.warn(
            f"empirical feature covariance rank {rank_emp} exceeds population rank {rank_pop}",
            DegenerateDesignWarning,
            stacklevel=2,
        )
    well_posed = rank_emp == rank_pop
    if well_posed:
        resid = target - design.phi @ theta_pop
        delta = sig_n_p @ (design.phi.T @ resid / n)
    else:
        delta = sig_n_p @ (design.phi.T @ target / n) - theta_pop
    leakage = max(float(delta @ moments.sigma @ delta), 0.0)
    variance = sigma2 / n * float(np.trace(moments.sigma @ sig_n_p))
    return RiskBreakdown(float(sigma2), rep, leakage, max(variance, 0.0), n, well_posed)


def probe_grid(sampler: Callable[[np.random.Generator, int], np.ndarray], size: int = PROBE_SIZE) -> np.ndarray:
    """Fixed-seed covariates for pointwise function comparisons."""
    return sampler(np.random.default_rng(PROBE_SEED), size)


def orbit_invariance_check(
    feature_map: Callable[[np.ndarray, object], np.ndarray],
    param,
    group_action: Callable[[object], object],
    design_x: np.ndarray,
    y: np.ndarray,
    probe_x: np.ndarray,
    tol: float = 1e-9,
) -> bool:
    """Fit min-norm OLS on psi(., param) and psi(., g.param); compare predictions on a probe grid."""
    moved = group_action(param)
    preds = []
    for p in (param, moved):
        theta = min_norm_ols(feature_map(design_x, p), y)
        preds.append(feature_map(probe_x, p) @ theta)
    scale = 1.0 + np.max(np.abs(preds[0]))
    return bool(np.max(np.abs(preds[0] - preds[1])) <= tol * scale)


def weighted_projection_derivative(M, sigma_down, w, direction, k: int) -> np.ndarray:
    """Derivative of P(M) w along ``direction``, P(M) the sigma_down-orthogonal projector onto range(M).

    Uses P(M) = S^{-1/2} Pi_k(S^{1/2} M S^{1/2}) S^{1/2} with S = sigma_down.
    """
    root = psd_sqrt(sigma_down)
    iroot = psd_sqrt(sigma_down, inverse=True)
    B = symmetrize(root @ M @ root)
    Bdot = symmetrize(root @ direction @ root)
    return iroot @ spectral_projector_derivative(B, Bdot, k) @ root @ w


def interaction_weights(
    M_star, sigma_down, w_star, basis: list[np.ndarray], coord_cov: np.ndarray, k: int
) -> np.ndarray:
    """Weights of ||L(Z)||^2 for Z = sum_a z_a E_a with z ~ N(0, coord_cov).

    L(v) = -D P[v] w_star as a linear function x -> ., measured in L2(N(0, sigma_down)).
    Returns the nonzero eigenvalues of C^{1/2} G C^{1/2}, sorted descending.
    """
    ell = np.column_stack([weighted_projection_derivative(M_star, sigma_down, w_star, E, k) for E in basis])
    G = symmetrize(ell.T @ sigma_down @ ell)
    C = psd_sqrt(symmetrize(coord_cov))
    vals = np.linalg.eigvalsh(symmetrize(C @ G @ C))[::-1]
    cut = 1e-10 * max(vals[0], 1e-300)
    return vals[vals > cut]
