"""Pure-numpy reference implementations of the hot Monte-Carlo kernels.

Each function mirrors one in the compiled ``_ckernels`` module and must agree
with it to round-off.
"""

from __future__ import annotations

import numpy as np

CHUNK = 1 << 15


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    logits = logits - logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits


def mixture_responsibilities(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Posterior component weights for the equal-weight unit-variance mixture."""
    logits = x @ centers.T - 0.5 * np.sum(centers * centers, axis=1)
    return _softmax_rows(logits)


def _gating_block(z: np.ndarray, w: np.ndarray, T: np.ndarray) -> np.ndarray:
    n = z.shape[0]
    K = w.shape[0]
    r = T.shape[0]
    pi = _softmax_rows(z @ w.T - 0.5 * np.sum(w * w, axis=1))
    out = np.empty((n, K, r + 1))
    for i in range(K):
        out[:, i, :r] = pi[:, i : i + 1] * ((z - w[i]) @ T.T)
        out[:, i, r] = pi[:, i]
    return out.reshape(n, K * (r + 1))


def gating_features(z: np.ndarray, w: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Rows of (pi_i * T (z - w_i), pi_i) blocks; z, w are (n, q), (K, q) and T is (r, q)."""
    return _gating_block(np.asarray(z, float), np.asarray(w, float), np.asarray(T, float))


def gating_moments(z: np.ndarray, w: np.ndarray, T: np.ndarray, g: np.ndarray | None = None):
    """Means of psi psi^T and psi g over the rows of z."""
    n = z.shape[0]
    p = w.shape[0] * (T.shape[0] + 1)
    S = np.zeros((p, p))
    c = np.zeros(p)
    for lo in range(0, n, CHUNK):
        phi = _gating_block(z[lo : lo + CHUNK], w, T)
        S += phi.T @ phi
        if g is not None:
            c += phi.T @ g[lo : lo + CHUNK]
    return S / n, c / n


def mixture_scores(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-sample score blocks -pi_i (x - u_i), flattened to (n, K*d)."""
    pi = mixture_responsibilities(x, centers)
    diff = x[:, None, :] - centers[None, :, :]
    return (-pi[:, :, None] * diff).reshape(x.shape[0], -1)


def fisher_moment(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Mean outer product of the score over the rows of x."""
    n = x.shape[0]
    q = centers.size
    F = np.zeros((q, q))
    for lo in range(0, n, CHUNK):
        s = mixture_scores(x[lo : lo + CHUNK], centers)
        F += s.T @ s
    return F / n


def pair_fourth_moment(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean of vec(x y^T) vec(x y^T)^T with row-major vec, shape (d*d, d*d)."""
    n, d = x.shape
    T = np.zeros((d * d, d * d))
    for lo in range(0, n, CHUNK):
        v = (x[lo : lo + CHUNK, :, None] * y[lo : lo + CHUNK, None, :]).reshape(-1, d * d)
        T += v.T @ v
    return T / n
