"""Dense symmetric-matrix kernel.

Eigensystems with a deterministic sign gauge, pseudoinverse calculus on the
stable-rank region, fixed-rank PSD truncation, the local section of the rank-k
PSD cone, derivatives of spectral projectors, and Gaussian fourth-moment
identities. Every routine is a pure function of its arguments.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EigengapError, InputError, ModelError, OutOfChartError, SingularityError

RANK_TOL = 1e-10
GAP_TOL = 1e-8
SYM_TOL = 1e-8
SECTION_COND_MAX = 1e8


@dataclass(frozen=True)
class EigenSystem:
    """Eigenvalues sorted descending and matching orthonormal eigenvector columns."""

    values: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return symmetrize((self.vectors * self.values) @ self.vectors.T)


@dataclass(frozen=True)
class Descriptor:
    """Rank-k PSD matrix, the orbit-invariant pre-training parameter."""

    matrix: np.ndarray
    rank: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def symmetrize(S: np.ndarray) -> np.ndarray:
    return 0.5 * (S + S.T)


def as_symmetric(S, name: str = "matrix", tol: float = SYM_TOL) -> np.ndarray:
    """Validate a square finite matrix that is symmetric up to round-off.

    Returns the exactly symmetric part, so downstream storage is symmetric.
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise InputError(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InputError(f"{name} has non-finite entries")
    scale = 1.0 + np.max(np.abs(S), initial=0.0)
    if np.max(np.abs(S - S.T), initial=0.0) > tol * scale:
        raise InputError(f"{name} is not symmetric")
    return symmetrize(S)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry positive; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def sym_eig(S) -> EigenSystem:
    S = as_symmetric(S)
    vals, vecs = np.linalg.eigh(S)
    vals = vals[::-1].copy()
    vecs = _fix_signs(vecs[:, ::-1].copy())
    return EigenSystem(vals, vecs)


def _threshold(values: np.ndarray, rank_tol: float) -> float:
    return rank_tol * np.max(np.abs(values), initial=0.0)


def numerical_rank(S, rank_tol: float = RANK_TOL) -> int:
    es = sym_eig(S)
    thr = _threshold(es.values, rank_tol)
    return int(np.sum(np.abs(es.values) > thr))


def pinv(S, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Moore-Penrose pseudoinverse of a symmetric matrix by eigenvalue thresholding."""
    es = sym_eig(S)
    thr = _threshold(es.values, rank_tol)
    keep = np.abs(es.values) > thr
    inv = np.zeros_like(es.values)
    inv[keep] = 1.0 / es.values[keep]
    return symmetrize((es.vectors * inv) @ es.vectors.T)


def pinv_derivative(A, H, rank_tol: float = RANK_TOL, kappa: float | None = None) -> np.ndarray:
    """Derivative of A -> A^+ along H on the constant-rank region.

    D(A^+)[H] = -A^+ H A^+ + A^+^2 H (I - A A^+) + (I - A^+ A) H A^+^2.

    Eigenvalues at or below ``rank_tol * max|lambda|`` count as exact zeros.
    A kept eigenvalue below ``kappa`` (default ``GAP_TOL * max|lambda|``) means
    the rank is not stable and raises SingularityError.
    """
    A = as_symmetric(A, "A")
    H = as_symmetric(H, "H")
    if A.shape != H.shape:
        raise InputError("A and H must have the same shape")
    es = sym_eig(A)
    thr = _threshold(es.values, rank_tol)
    keep = np.abs(es.values) > thr
    if keep.any():
        floor = GAP_TOL * np.max(np.abs(es.values)) if kappa is None else kappa
        if np.min(np.abs(es.values[keep])) < floor:
            raise SingularityError("smallest retained eigenvalue is below the stability floor")
    inv = np.zeros_like(es.values)
    inv[keep] = 1.0 / es.values[keep]
    U = es.vectors
    Ap = (U * inv) @ U.T
    Ap2 = (U * inv**2) @ U.T
    Q = np.eye(A.shape[0]) - (U[:, keep] @ U[:, keep].T)
    D = -Ap @ H @ Ap + Ap2 @ H @ Q + Q @ H @ Ap2
    return symmetrize(D)


def rank_k_truncate_psd(S, k: int) -> Descriptor:
    """Keep the k largest eigenvalues, clipped below at zero."""
    S = as_symmetric(S)
    d = S.shape[0]
    if not 0 <= k <= d:
        raise InputError(f"k={k} must lie in [0, {d}]")
    es = sym_eig(S)
    thr = _threshold(es.values, RANK_TOL)
    significant = np.abs(es.values) > thr
    # already a PSD matrix of rank <= k: truncation is the identity map
    if not significant[k:].any() and np.all(es.values[significant] > 0):
        return Descriptor(S.copy(), int(significant.sum()))
    kept = np.maximum(es.values[:k], 0.0)
    U = es.vectors[:, :k]
    M = symmetrize((U * kept) @ U.T)
    return Descriptor(M, int(np.sum(kept > thr)))


def top_k_projector(B, k: int) -> np.ndarray:
    es = sym_eig(B)
    U1 = es.vectors[:, :k]
    return symmetrize(U1 @ U1.T)


def eigengap(values: np.ndarray, k: int) -> float:
    if k <= 0 or k >= len(values):
        return np.inf
    return float(values[k - 1] - values[k])


def spectral_projector_derivative(B, Bdot, k: int, gap_tol: float = GAP_TOL) -> np.ndarray:
    """Derivative of the top-k eigenprojector of B along Bdot."""
    B = as_symmetric(B, "B")
    Bdot = as_symmetric(Bdot, "Bdot")
    d = B.shape[0]
    if not 0 <= k <= d:
        raise InputError(f"k={k} must lie in [0, {d}]")
    if k in (0, d):
        return np.zeros_like(B)
    es = sym_eig(B)
    if eigengap(es.values, k) < gap_tol:
        raise EigengapError(f"eigengap {eigengap(es.values, k):.3e} below {gap_tol:.1e}")
    U1, U2 = es.vectors[:, :k], es.vectors[:, k:]
    G = U2.T @ Bdot @ U1
    delta = es.values[None, :k] - es.values[k:, None]
    X = U2 @ (G / delta) @ U1.T
    return X + X.T


def tangent_basis(U1: np.ndarray, U2: np.ndarray) -> list[np.ndarray]:
    """Frobenius-orthonormal basis of the tangent space {[[A,B],[B^T,0]]} at range(U1).

    Ordered: symmetric top block entries (i <= j), then off-diagonal block entries.
    """
    k = U1.shape[1]
    basis = []
    for i in range(k):
        for j in range(i, k):
            if i == j:
                E = np.outer(U1[:, i], U1[:, i])
            else:
                E = (np.outer(U1[:, i], U1[:, j]) + np.outer(U1[:, j], U1[:, i])) / np.sqrt(2.0)
            basis.append(E)
    for i in range(k):
        for a in range(U2.shape[1]):
            E = (np.outer(U1[:, i], U2[:, a]) + np.outer(U2[:, a], U1[:, i])) / np.sqrt(2.0)
            basis.append(E)
    return basis


def is_tangent(H, U2: np.ndarray, tol: float = 1e-8) -> bool:
    """True when the normal block U2^T H U2 vanishes."""
    H = as_symmetric(H, "H")
    scale = 1.0 + np.max(np.abs(H), initial=0.0)
    return bool(np.max(np.abs(U2.T @ H @ U2), initial=0.0) <= tol * scale)


def psd_sqrt(S, inverse: bool = False) -> np.ndarray:
    """Symmetric square root (or inverse square root) of a PSD matrix."""
    es = sym_eig(S)
    vals = np.maximum(es.values, 0.0)
    if inverse:
        if np.min(vals) <= 0:
            raise SingularityError("inverse square root of a singular matrix")
        vals = 1.0 / np.sqrt(vals)
    else:
        vals = np.sqrt(vals)
    return symmetrize((es.vectors * vals) @ es.vectors.T)


def local_section(M, anchor: np.ndarray, cond_max: float = SECTION_COND_MAX) -> np.ndarray:
    """Section s(M) = Lambda^{1/2} U^T of the rank-k PSD cone near range(anchor).

    U = P(M) anchor B^{-1/2} with B = anchor^T P(M) anchor and Lambda = U^T M U.
    The result is k x d and satisfies s^T s = M whenever rank(M) <= k.
    """
    M = as_symmetric(M, "M")
    anchor = np.asarray(anchor, dtype=float)
    d = M.shape[0]
    if anchor.ndim != 2 or anchor.shape[0] != d:
        raise InputError("anchor must be a d x k matrix")
    k = anchor.shape[1]
    es = sym_eig(M)
    lead = max(abs(es.values[0]), abs(es.values[-1]), 1e-300)
    if k < d and es.values[k] > 1e-8 * lead:
        raise InputError(f"M has rank above {k}")
    if es.values[-1] < -1e-8 * lead:
        raise InputError("M is not PSD")
    P = es.vectors[:, :k] @ es.vectors[:, :k].T
    B = symmetrize(anchor.T @ P @ anchor)
    bvals, bvecs = np.linalg.eigh(B)
    if bvals[0] <= 0 or bvals[-1] / bvals[0] > cond_max:
        raise OutOfChartError("anchor is (nearly) orthogonal to range(M)")
    B_isqrt = (bvecs / np.sqrt(bvals)) @ bvecs.T
    U = P @ anchor @ B_isqrt
    Lam = symmetrize(U.T @ M @ U)
    lvals, lvecs = np.linalg.eigh(Lam)
    Lam_sqrt = (lvecs * np.sqrt(np.maximum(lvals, 0.0))) @ lvecs.T
    return Lam_sqrt @ U.T


def _check_joint_psd(S: np.ndarray, name: str) -> None:
    vals = np.linalg.eigvalsh(symmetrize(S))
    scale = max(1.0, np.max(np.abs(vals), initial=0.0))
    if vals[0] < -1e-10 * scale:
        raise ModelError(f"{name} is not PSD (min eigenvalue {vals[0]:.3e})")


def gaussian_bilinear_moment(A, B, sigma_u, sigma_v, sigma_uv) -> tuple[float, float]:
    """E[(U^T A V)(U^T B V)] and the covariance for jointly Gaussian centred (U, V).

    sigma_uv = E[U V^T]. The general Isserlis form is used; for symmetric A, B and
    sigma_uv it reduces to tr(A S_uv)tr(B S_uv) + tr(A S_u B S_v) + tr(A S_uv B^T S_uv^T).
    """
    A, B = np.asarray(A, float), np.asarray(B, float)
    Su, Sv, Suv = np.asarray(sigma_u, float), np.asarray(sigma_v, float), np.asarray(sigma_uv, float)
    joint = np.block([[Su, Suv], [Suv.T, Sv]])
    _check_joint_psd(joint, "joint covariance")
    mean_a = np.trace(A.T @ Suv)
    mean_b = np.trace(B.T @ Suv)
    cov = np.trace(A.T @ Su @ B @ Sv) + np.trace(A.T @ Suv @ B.T @ Suv)
    return float(mean_a * mean_b + cov), float(cov)


def gaussian_quadratic_moment(A, B, sigma) -> tuple[float, float]:
    """E[(U^T A U)(U^T B U)] and the covariance for U ~ N(0, sigma)."""
    A, B, S = np.asarray(A, float), np.asarray(B, float), np.asarray(sigma, float)
    _check_joint_psd(S, "sigma")
    cov = np.trace(A @ S @ B @ S) + np.trace(A @ S @ B.T @ S)
    return float(np.trace(A @ S) * np.trace(B @ S) + cov), float(cov)
