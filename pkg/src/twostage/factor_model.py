"""Gaussian factor model pre-trained by probabilistic PCA.

x = A h + mu with h ~ N(0, I_k), mu ~ N(0, I_d); downstream y = beta^T h + nu.
The descriptor is M = A A^T and the downstream class is the set of linear
functions whose coefficient lies in range(M).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .downstream import interaction_weights, weighted_projection_derivative
from .errors import InputError, ModelError
from .laws import LimitLaw
from .linalg import Descriptor, local_section, psd_sqrt, sym_eig, symmetrize, tangent_basis


@dataclass(frozen=True)
class FactorPopulation:
    a_star: np.ndarray
    beta_star: np.ndarray
    sigma_nu: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.a_star, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta_star, dtype=float))
        d, k = A.shape
        if not 1 <= k < d:
            raise InputError(f"need 1 <= k < d, got k={k}, d={d}")
        if beta.shape != (k,):
            raise InputError("beta_star must have length k")
        if self.sigma_nu < 0:
            raise InputError("sigma_nu must be nonnegative")
        if np.linalg.matrix_rank(A) < k:
            raise ModelError("a_star must have full column rank")
        object.__setattr__(self, "a_star", A)
        object.__setattr__(self, "beta_star", beta)
        object.__setattr__(self, "sigma_nu", float(self.sigma_nu))

    @classmethod
    def orthogonal(cls, d: int, norms, beta_star, sigma_nu: float = 1.0) -> "FactorPopulation":
        """Loadings norms[i] * e_i."""
        norms = np.asarray(norms, dtype=float)
        A = np.zeros((d, len(norms)))
        A[np.arange(len(norms)), np.arange(len(norms))] = norms
        return cls(A, beta_star, sigma_nu)

    @property
    def d(self) -> int:
        return self.a_star.shape[0]

    @property
    def k(self) -> int:
        return self.a_star.shape[1]

    @property
    def m_star(self) -> np.ndarray:
        return symmetrize(self.a_star @ self.a_star.T)

    @property
    def sigma_x(self) -> np.ndarray:
        return np.eye(self.d) + self.m_star

    @property
    def sigma2(self) -> float:
        """Downstream noise: sigma_nu^2 + Var(beta^T h | x)."""
        inner = np.eye(self.k) + self.a_star.T @ self.a_star
        return self.sigma_nu**2 + float(self.beta_star @ np.linalg.solve(inner, self.beta_star))

    @property
    def w_star(self) -> np.ndarray:
        """f_star(x) = w_star^T x with w_star = Sigma_x^{-1} A beta."""
        return np.linalg.solve(self.sigma_x, self.a_star @ self.beta_star)

    def eigensplit(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(U1, U2, sigma) with M_star = U1 diag(sigma) U1^T."""
        es = sym_eig(self.m_star)
        return es.vectors[:, : self.k], es.vectors[:, self.k :], es.values[: self.k]

    def anchor(self) -> np.ndarray:
        return self.eigensplit()[0]


def sample_factor(pop: FactorPopulation, n: int, rng: np.random.Generator, with_labels: bool = False):
    h = rng.standard_normal((n, pop.k))
    x = h @ pop.a_star.T + rng.standard_normal((n, pop.d))
    if not with_labels:
        return x
    y = h @ pop.beta_star + pop.sigma_nu * rng.standard_normal(n)
    return x, y


def ppca_mle(S, k: int) -> Descriptor:
    """M = U_k diag((lambda_i - 1)_+) U_k^T from the top-k eigenpairs of S."""
    es = sym_eig(S)
    if not 0 < k <= len(es.values):
        raise InputError(f"k={k} out of range")
    vals = np.maximum(es.values[:k] - 1.0, 0.0)
    U = es.vectors[:, :k]
    return Descriptor(symmetrize((U * vals) @ U.T), int(np.sum(vals > 0)))


def feature_matrix(A: np.ndarray) -> np.ndarray:
    """W(A) = (I_k + A^T A)^{-1} A^T, equal to A^T (I_d + A A^T)^{-1}."""
    A = np.atleast_2d(A)
    return np.linalg.solve(np.eye(A.shape[1]) + A.T @ A, A.T)


def factor_features(x: np.ndarray, A: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=float) @ feature_matrix(A).T


def factor_section(pop: FactorPopulation, M: np.ndarray) -> np.ndarray:
    """d x k section s(M) with s s^T = M, anchored at range(M_star)."""
    return local_section(M, pop.anchor()).T


def factor_limit_law(pop: FactorPopulation, alpha: float) -> LimitLaw:
    """sigma2 k + (1/alpha) ||(I + Sigma_star)^{-1/2} U1^T A beta||^2 chi2_{d-k}."""
    if alpha <= 0:
        raise InputError("alpha must be positive")
    U1, _, sig = pop.eigensplit()
    v = U1.T @ pop.a_star @ pop.beta_star
    weight = float(np.sum(v**2 / (1.0 + sig))) / alpha
    return LimitLaw(pop.sigma2 * pop.k, ((weight, pop.d - pop.k),) if weight > 0 else ())


def factor_limit_law_exact(pop: FactorPopulation, alpha: float) -> LimitLaw:
    """Limit law keeping the rotation of range(M) in the projector derivative.

    The interaction weight is ||(Sigma_star (I + Sigma_star))^{-1/2} Sigma_star^{1/2} ...||,
    written here as sum_i v_i^2 / (sigma_i^2 (1 + sigma_i)) with v = U1^T A beta.
    """
    if alpha <= 0:
        raise InputError("alpha must be positive")
    U1, _, sig = pop.eigensplit()
    v = U1.T @ pop.a_star @ pop.beta_star
    weight = float(np.sum(v**2 / (sig**2 * (1.0 + sig)))) / alpha
    return LimitLaw(pop.sigma2 * pop.k, ((weight, pop.d - pop.k),) if weight > 0 else ())


def factor_limit_law_numeric(pop: FactorPopulation, alpha: float) -> LimitLaw:
    """Same law assembled from the Wishart fluctuation and the numeric projector derivative."""
    U1, U2, _ = pop.eigensplit()
    basis = tangent_basis(U1, U2)
    Sx = pop.sigma_x
    n = len(basis)
    cov = np.empty((n, n))
    for a in range(n):
        for b in range(a, n):
            cov[a, b] = cov[b, a] = 2.0 * np.trace(basis[a] @ Sx @ basis[b] @ Sx)
    weights = interaction_weights(pop.m_star, Sx, pop.w_star, basis, cov, pop.k) / alpha
    return LimitLaw.from_weights(pop.sigma2 * pop.k, weights)


def fluctuation_sample(pop: FactorPopulation, rng: np.random.Generator) -> np.ndarray:
    """Z = P G + G P - P G P with G = Sigma_x^{1/2} (W + W^T) Sigma_x^{1/2} / sqrt(2)."""
    d = pop.d
    W = rng.standard_normal((d, d))
    root = psd_sqrt(pop.sigma_x)
    G = root @ (W + W.T) @ root / np.sqrt(2.0)
    U1 = pop.anchor()
    P = U1 @ U1.T
    return symmetrize(P @ G + G @ P - P @ G @ P)


def interaction_norm(pop: FactorPopulation, Z: np.ndarray) -> float:
    """||(I - P) Z Sigma_x^{-1} A beta||^2, the closed-form pipeline for ||L(Z)||^2."""
    U1 = pop.anchor()
    P = U1 @ U1.T
    g = (np.eye(pop.d) - P) @ Z @ np.linalg.solve(pop.sigma_x, pop.a_star @ pop.beta_star)
    return float(g @ g)


def interaction_norm_exact(pop: FactorPopulation, Z: np.ndarray) -> float:
    """||D P[Z] w_star||^2 in L2(N(0, Sigma_x)) with the full projector derivative."""
    g = weighted_projection_derivative(pop.m_star, pop.sigma_x, pop.w_star, Z, pop.k)
    return float(g @ pop.sigma_x @ g)
