"""Equal-weight spherical Gaussian mixture: center MLE, gating features and the interaction term.

Pre-training data come from x | (tau = i) ~ N(u_i, I_d) with tau uniform on [K].
Downstream features are the subspace-aware gating blocks

    psi_U(x) = (pi_i(x; U) * coords(P_U (x - u_i)), pi_i(x; U))_{i=1..K},

with P_U the top-r projector of the centered second moment S(U) and coords
taken in a gauge basis fixed once at the reference centers.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from . import kernels
from .errors import (
    AssumptionViolation,
    GaugeWarning,
    InputError,
    ModelError,
    NumericalError,
    OutOfChartError,
    SamplingError,
)
from .linalg import GAP_TOL, pinv, psd_sqrt, symmetrize

CHUNK = 8192
DISTINCT_TOL = 1e-12


@dataclass(frozen=True)
class MixtureParams:
    centers: np.ndarray

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.centers, dtype=float))
        if U.ndim != 2 or U.shape[0] < 2:
            raise ModelError("a mixture needs K >= 2 centers")
        if not np.all(np.isfinite(U)):
            raise InputError("centers must be finite")
        diff = U[:, None, :] - U[None, :, :]
        dist = np.sqrt(np.sum(diff**2, axis=2))
        np.fill_diagonal(dist, np.inf)
        if dist.min() <= DISTINCT_TOL:
            raise ModelError("mixture centers must be pairwise distinct")
        U = U.copy()
        U.setflags(write=False)
        object.__setattr__(self, "centers", U)

    @property
    def K(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def mean(self) -> np.ndarray:
        return self.centers.mean(axis=0)

    @property
    def second_moment(self) -> np.ndarray:
        """S(U) = sum_i (u_i - ubar)(u_i - ubar)^T."""
        c = self.centers - self.mean
        return symmetrize(c.T @ c)

    def canonical(self) -> "MixtureParams":
        """Reference gauge: centers sorted lexicographically, descending in each coordinate."""
        order = sorted(range(self.K), key=lambda i: tuple(-self.centers[i]))
        return MixtureParams(self.centers[order])

    def permuted(self, perm) -> "MixtureParams":
        return MixtureParams(self.centers[np.asarray(perm)])

    @classmethod
    def simplex(cls, K: int, d: int, beta: float) -> "MixtureParams":
        """Centers beta * e_i, i = 1..K (needs K <= d)."""
        if K > d:
            raise InputError(f"need K <= d, got K={K}, d={d}")
        U = np.zeros((K, d))
        U[np.arange(K), np.arange(K)] = beta
        return cls(U)


def sample_mixture(params: MixtureParams, n: int, rng: np.random.Generator) -> np.ndarray:
    labels = rng.integers(params.K, size=n)
    return params.centers[labels] + rng.standard_normal((n, params.d))


def mixture_log_likelihood(x: np.ndarray, centers: np.ndarray) -> float:
    """Mean log-density of the equal-weight unit-variance mixture."""
    x = np.atleast_2d(x)
    K, d = centers.shape
    sq = np.sum(x * x, axis=1)[:, None] - 2.0 * x @ centers.T + np.sum(centers * centers, axis=1)
    return float(np.mean(logsumexp(-0.5 * sq, axis=1)) - np.log(K) - 0.5 * d * np.log(2 * np.pi))


def mixture_score_hessian(U, x) -> tuple[np.ndarray, np.ndarray]:
    """Gradient (K, d) and Hessian (Kd, Kd) of -log p(x; U) in the centers."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    x = np.asarray(x, dtype=float).ravel()
    K, d = U.shape
    pi = kernels.mixture_responsibilities(x[None, :], U)[0]
    diff = x[None, :] - U
    grad = -pi[:, None] * diff
    H = np.zeros((K * d, K * d))
    for i in range(K):
        for j in range(K):
            blk = pi[i] * pi[j] * np.outer(diff[i], diff[j])
            if i == j:
                blk = pi[i] * np.eye(d) - pi[i] * np.outer(diff[i], diff[i]) + blk
            H[i * d : (i + 1) * d, j * d : (j + 1) * d] = blk
    return grad, symmetrize(H)


# ---------------------------------------------------------------- fitting


@dataclass(frozen=True)
class MixtureFitOptions:
    restarts: int = 5
    max_iters: int = 1000
    tol: float = 1e-10
    min_samples: int = 100
    ll_slack: float = 1e-10
    seed: int = 0


def _kmeanspp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    idx = [int(rng.integers(x.shape[0]))]
    d2 = np.sum((x - x[idx[0]]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            nxt = int(rng.integers(x.shape[0]))
        else:
            nxt = int(rng.choice(x.shape[0], p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((x - x[nxt]) ** 2, axis=1))
    return x[idx].copy()


def _em(x: np.ndarray, U: np.ndarray, opts: MixtureFitOptions) -> tuple[np.ndarray, float]:
    ll = mixture_log_likelihood(x, U)
    for _ in range(opts.max_iters):
        pi = kernels.mixture_responsibilities(x, U)
        mass = pi.sum(axis=0)
        if np.any(mass <= 0):
            raise NumericalError("EM produced an empty component")
        U = (pi.T @ x) / mass[:, None]
        new = mixture_log_likelihood(x, U)
        if new < ll - opts.ll_slack * (1.0 + abs(ll)):
            raise NumericalError(f"EM log-likelihood decreased from {ll:.12g} to {new:.12g}")
        done = abs(new - ll) <= opts.tol * (1.0 + abs(ll))
        ll = new
        if done:
            break
    return U, ll


def align_to_reference(centers: np.ndarray, reference: MixtureParams, ambiguity_tol: float = 1e-9) -> np.ndarray:
    """Permute rows of ``centers`` to minimize total squared distance to the reference.

    Warns with GaugeWarning when a second assignment is within ``ambiguity_tol``.
    """
    ref = reference.centers
    cost = np.sum((centers[:, None, :] - ref[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    best = cost[rows, cols].sum()
    # the runner-up differs from the optimum in at least one edge
    big = 1.0 + 4.0 * cost.sum()
    second = np.inf
    for i, j in zip(rows, cols):
        c2 = cost.copy()
        c2[i, j] = big
        r2, k2 = linear_sum_assignment(c2)
        second = min(second, c2[r2, k2].sum())
    if second - best <= ambiguity_tol:
        warnings.warn("center alignment is ambiguous: two assignments have equal cost", GaugeWarning, stacklevel=2)
    out = np.empty_like(centers)
    out[cols] = centers[rows]
    return out


def fit_centers(
    data: np.ndarray, K: int, opts: MixtureFitOptions = MixtureFitOptions(), reference: MixtureParams | None = None
) -> MixtureParams:
    """EM from k-means++ starts; the best log-likelihood wins, then aligned to ``reference``."""
    x = np.asarray(data, dtype=float)
    if x.shape[0] < opts.min_samples:
        raise InputError(f"need at least {opts.min_samples} samples, got {x.shape[0]}")
    rng = np.random.default_rng(opts.seed)
    best_U, best_ll = None, -np.inf
    for _ in range(opts.restarts):
        U, ll = _em(x, _kmeanspp(x, K, rng), opts)
        if ll > best_ll:
            best_U, best_ll = U, ll
    if reference is not None:
        if reference.K != K or reference.d != x.shape[1]:
            raise InputError("reference shape does not match (K, d)")
        best_U = align_to_reference(best_U, reference)
    return MixtureParams(best_U)


# ---------------------------------------------------------------- gating


def _gram_schmidt(vectors: np.ndarray, tol: float) -> np.ndarray:
    basis: list[np.ndarray] = []
    scale = max(np.max(np.linalg.norm(vectors, axis=1)), 1e-300)
    for v in vectors:
        r = v - sum((b @ v) * b for b in basis) if basis else v.copy()
        nr = np.linalg.norm(r)
        if nr > tol * scale:
            basis.append(r / nr)
    return np.array(basis).T if basis else np.zeros((vectors.shape[1], 0))


@dataclass(frozen=True)
class GatingState:
    """Projector onto the top-r_star eigenspace of S(U) and its gauge basis.

    ``anchor`` is the basis chosen at the reference centers; the basis at any
    nearby U is the polar-orthonormalized projection of the anchor.
    """

    r_star: int
    projector: np.ndarray
    basis: np.ndarray
    anchor: np.ndarray = field(repr=False)
    gap: float = 0.0

    def moved(self, U, gap_tol: float = GAP_TOL) -> "GatingState":
        P, gap = _top_projector(np.atleast_2d(U), self.r_star, gap_tol)
        a = self.anchor
        gram = symmetrize(a.T @ P @ a)
        if np.linalg.eigvalsh(gram)[0] <= 1e-8:
            raise OutOfChartError("centers moved outside the gauge chart")
        B = P @ a @ psd_sqrt(gram, inverse=True)
        return GatingState(self.r_star, P, B, a, gap)


def _top_projector(U: np.ndarray, r: int, gap_tol: float) -> tuple[np.ndarray, float]:
    c = U - U.mean(axis=0)
    S = symmetrize(c.T @ c)
    vals, vecs = np.linalg.eigh(S)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    lower = vals[r] if r < len(vals) else 0.0
    gap = float(vals[r - 1] - lower)
    if gap <= gap_tol * max(vals[0], 1.0):
        raise OutOfChartError(f"eigengap {gap:.3g} of S(U) at rank {r} is below tolerance")
    V = vecs[:, :r]
    return symmetrize(V @ V.T), gap


def gating_state(params: MixtureParams, r_star: int | None = None, rank_tol: float = 1e-8) -> GatingState:
    """Reference gating state; r_star defaults to the numerical rank of S(U)."""
    U = params.centers
    S = params.second_moment
    vals = np.linalg.eigvalsh(S)[::-1]
    if r_star is None:
        r_star = int(np.sum(vals > rank_tol * max(vals[0], 1e-300)))
    if not 1 <= r_star <= min(params.K - 1, params.d):
        raise InputError(f"r_star={r_star} out of range")
    P, gap = _top_projector(U, r_star, GAP_TOL)
    anchor = _gram_schmidt((U - U.mean(axis=0)) @ P, 1e-8)
    if anchor.shape[1] != r_star:
        raise ModelError("projected centers do not span the gating subspace")
    return GatingState(r_star, P, anchor, anchor, gap)


@dataclass(frozen=True)
class _Reduced:
    """Coordinates in span(u_1..u_K): z = x Q, w = U Q, T = B^T Q."""

    Q: np.ndarray
    w: np.ndarray
    T: np.ndarray

    @classmethod
    def build(cls, U: np.ndarray, state: GatingState) -> "_Reduced":
        _, s, vt = np.linalg.svd(U, full_matrices=False)
        Q = vt[s > 1e-12 * s[0]].T
        return cls(Q, U @ Q, state.basis.T @ Q)

    def features(self, x: np.ndarray) -> np.ndarray:
        return kernels.gating_features(x @ self.Q, self.w, self.T)

    def moments(self, x: np.ndarray, g: np.ndarray | None = None):
        return kernels.gating_moments(x @ self.Q, self.w, self.T, g)


def feature_dim(K: int, r_star: int) -> int:
    return K * (r_star + 1)


def gating_features(x, U, gating: GatingState) -> np.ndarray:
    """(n, K(r_star+1)) feature rows of psi_U; raises OutOfChartError off the chart."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    local = gating.moved(U)
    return _Reduced.build(U, local).features(np.atleast_2d(np.asarray(x, dtype=float)))


def fisher_information(params: MixtureParams, N: int, rng: np.random.Generator) -> np.ndarray:
    """Monte-Carlo mean of score outer products at the given centers."""
    if N < 10_000:
        raise InputError(f"need N >= 10000 Fisher samples, got {N}")
    F = _fisher_sum(params, N, rng) / N
    _check_psd(F)
    return F


def _fisher_sum(params: MixtureParams, N: int, rng: np.random.Generator) -> np.ndarray:
    q = params.K * params.d
    F = np.zeros((q, q))
    for lo in range(0, N, CHUNK):
        cnt = min(CHUNK, N - lo)
        F += cnt * kernels.fisher_moment(sample_mixture(params, cnt, rng), params.centers)
    return symmetrize(F)


def _check_psd(F: np.ndarray) -> None:
    low = np.linalg.eigvalsh(F)[0]
    if low < -1e-8 * max(1.0, np.abs(F).max()):
        raise SamplingError(f"estimated Fisher information is not PSD (min eigenvalue {low:.3g})")


# ---------------------------------------------------------------- signal and interaction term


@dataclass(frozen=True)
class SignalSpec:
    """Per-block coefficients theta_i in R^{r_star} and offsets b_i."""

    theta: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        th = np.atleast_2d(np.asarray(self.theta, dtype=float))
        b = np.atleast_1d(np.asarray(self.offset, dtype=float))
        if th.shape[0] != b.shape[0]:
            raise InputError("theta and offset must have one entry per component")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "offset", b)

    @property
    def K(self) -> int:
        return self.theta.shape[0]

    @property
    def r_star(self) -> int:
        return self.theta.shape[1]

    def vector(self) -> np.ndarray:
        """Coefficient vector aligned with the gating feature layout."""
        return np.column_stack([self.theta, self.offset]).ravel()

    @classmethod
    def block_preset(cls, K: int, r_star: int) -> "SignalSpec":
        """Block i proportional to (1/i) 1_{r_star+1}, whole vector unit norm."""
        blocks = np.repeat((1.0 / np.arange(1, K + 1))[:, None], r_star + 1, axis=1)
        blocks /= np.linalg.norm(blocks)
        return cls(blocks[:, :r_star], blocks[:, r_star])

    @classmethod
    def from_vector(cls, vec, K: int, r_star: int) -> "SignalSpec":
        v = np.asarray(vec, dtype=float).reshape(K, r_star + 1)
        return cls(v[:, :r_star], v[:, r_star])


@dataclass(frozen=True)
class InteractionConfig:
    n_fisher: int = 100_000
    n_proj: int = 1_000_000
    n_eval: int = 1_000_000
    h_rel: float = 1e-3
    batches: int = 10
    seed: int = 0
    rank_tol: float = 1e-9


@dataclass(frozen=True)
class InteractionEstimate:
    value: float
    se: float
    se_eval: float
    se_resample: float
    h: float
    r_star: int
    n_directions: int

    def __float__(self) -> float:
        return self.value


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def interaction_term_mc(params: MixtureParams, signal: SignalSpec, cfg: InteractionConfig = InteractionConfig()) -> InteractionEstimate:
    """Monte-Carlo estimate of E||L(Z)||^2 with Z ~ N(0, pinv(Fisher)).

    L_a = -(Pi_{U+h e_a} f - Pi_{U-h e_a} f) / (2h) for every coordinate direction
    e_a of the stacked centers; all projections share one sample set (common
    random numbers). The standard error combines the evaluation-sample error with
    a delete-one-batch jackknife over the Fisher and projection samples.
    """
    U = params.centers
    K, d = U.shape
    B = cfg.batches
    if B < 2:
        raise InputError("need at least two batches")
    if min(cfg.n_fisher, cfg.n_proj, cfg.n_eval) < B:
        raise InputError("sample budgets must exceed the batch count")
    state = gating_state(params)
    r = state.r_star
    if signal.K != K or signal.r_star != r:
        raise InputError(f"signal has shape ({signal.K}, {signal.r_star}), expected ({K}, {r})")
    theta_star = signal.vector()
    p = feature_dim(K, r)
    nd = K * d
    h = cfg.h_rel * (1.0 + np.linalg.norm(U))
    root = np.random.default_rng(cfg.seed)
    fisher_rng, proj_rng, eval_rng = root.spawn(3)

    # Fisher information, one block per batch
    f_counts = _split(cfg.n_fisher, B)
    F_b = np.array([_fisher_sum(params, c, g) for c, g in zip(f_counts, fisher_rng.spawn(B))])
    F_tot = F_b.sum(axis=0)
    _check_psd(F_tot / cfg.n_fisher)

    center = _Reduced.build(U, state)
    moved = []
    for a in range(nd):
        for s in (1.0, -1.0):
            Ua = U.copy().ravel()
            Ua[a] += s * h
            Ua = Ua.reshape(K, d)
            moved.append(_Reduced.build(Ua, state.moved(Ua)))

    # projection moments at every perturbed U, on shared samples
    p_counts = _split(cfg.n_proj, B)
    S_b = np.zeros((B, 2 * nd, p, p))
    c_b = np.zeros((B, 2 * nd, p))
    S_center = np.zeros((p, p))
    for b, (cnt, g) in enumerate(zip(p_counts, proj_rng.spawn(B))):
        for lo in range(0, cnt, CHUNK):
            m = min(CHUNK, cnt - lo)
            x = sample_mixture(params, m, g)
            f = center.features(x) @ theta_star
            S_center += m * center.moments(x)[0]
            for j, red in enumerate(moved):
                Sj, cj = red.moments(x, f)
                S_b[b, j] += m * Sj
                c_b[b, j] += m * cj
    vals = np.linalg.eigvalsh(symmetrize(S_center / cfg.n_proj))
    if vals[0] <= cfg.rank_tol * vals[-1]:
        raise AssumptionViolation("gating feature covariance is rank deficient at the reference centers")

    # coefficients: column 0 uses all batches, column 1 + j drops batch j
    S_tot, c_tot = S_b.sum(axis=0), c_b.sum(axis=0)
    coefs = np.empty((2 * nd, p, B + 1))
    for j in range(2 * nd):
        coefs[j, :, 0] = np.linalg.solve(S_tot[j], c_tot[j])
        for bb in range(B):
            coefs[j, :, bb + 1] = np.linalg.solve(S_tot[j] - S_b[bb, j], c_tot[j] - c_b[bb, j])
    V = [pinv(F_tot / cfg.n_fisher)]
    for bb in range(B):
        V.append(pinv((F_tot - F_b[bb]) / (cfg.n_fisher - f_counts[bb])))

    # evaluation pass
    G = np.zeros((B + 1, nd, nd))
    q_sum = q_sq = 0.0
    g = eval_rng
    for lo in range(0, cfg.n_eval, CHUNK):
        m = min(CHUNK, cfg.n_eval - lo)
        x = sample_mixture(params, m, g)
        # layout (replicate, direction, sample) keeps the Gram products contiguous
        L = np.empty((B + 1, nd, m))
        for a in range(nd):
            plus = moved[2 * a].features(x) @ coefs[2 * a]
            minus = moved[2 * a + 1].features(x) @ coefs[2 * a + 1]
            L[:, a, :] = ((minus - plus) / (2.0 * h)).T
        G += L @ L.transpose(0, 2, 1)
        q = np.sum((V[0] @ L[0]) * L[0], axis=0)
        q_sum += q.sum()
        q_sq += q @ q
    G /= cfg.n_eval
    est = [float(np.sum(V[j] * G[j])) for j in range(B + 1)]
    value = est[0]
    var_q = max(q_sq / cfg.n_eval - (q_sum / cfg.n_eval) ** 2, 0.0)
    se_eval = float(np.sqrt(var_q / cfg.n_eval))
    jack = np.array(est[1:])
    se_res = float(np.sqrt((B - 1) / B * np.sum((jack - jack.mean()) ** 2)))
    return InteractionEstimate(value, float(np.hypot(se_eval, se_res)), se_eval, se_res, h, r, nd)


def permutation_equivariance_gap(x, params: MixtureParams, perm, gating: GatingState | None = None) -> float:
    """Max deviation between psi_{U perm} and the block-permuted psi_U."""
    gating = gating_state(params) if gating is None else gating
    K, r = params.K, gating.r_star
    base = gating_features(x, params.centers, gating).reshape(-1, K, r + 1)
    moved = gating_features(x, params.centers[np.asarray(perm)], gating).reshape(-1, K, r + 1)
    return float(np.max(np.abs(moved - base[:, np.asarray(perm), :])))


def enumerate_alignments(centers: np.ndarray, reference: MixtureParams) -> list[tuple[float, tuple[int, ...]]]:
    """All assignment costs for small K, sorted; used to cross-check align_to_reference."""
    K = reference.K
    if K > 8:
        raise InputError("enumeration is limited to K <= 8")
    out = []
    for perm in itertools.permutations(range(K)):
        out.append((float(np.sum((centers[list(perm)] - reference.centers) ** 2)), perm))
    return sorted(out)
