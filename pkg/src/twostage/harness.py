"""Reproducible Monte-Carlo engine for the two-stage pipeline.

Every replication r draws from its own PCG64 stream seeded by
``stream_seed(base_seed, r)``; results are merged by replication index, so
serial and threaded runs give identical output.

Downstream labels are never sampled: the conditional risk averages the label
noise analytically, so each replication needs only the pre-training sample,
the fitted descriptor and the downstream design.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import ks_2samp

from .downstream import DesignBlock, RiskBreakdown, linear_gaussian_moments, risk_decompose
from .errors import FitError, InputError, TwoStageError
from .factor_model import FactorPopulation, factor_section, feature_matrix, ppca_mle, sample_factor
from .laws import LimitLaw, law_sample
from .spectral_model import FitOptions, SpectralPopulation, _gaussian_factor, fit_descriptor, sample_triplets

__all__ = [
    "LimitLaw",
    "law_sample",
    "stream_seed",
    "stream_rng",
    "EmpiricalSample",
    "FactorExperiment",
    "SpectralExperiment",
    "run_two_stage",
    "ComparisonReport",
    "compare",
    "baseline_alpha0",
    "sample_size_for_alpha",
    "worker_count",
]

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
MAX_FAILURE_RATE = 0.02
WORKERS_ENV = "TWOSTAGE_WORKERS"


def _mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def stream_seed(base_seed: int, index: int) -> int:
    """Splitmix64-style seed for replication ``index``; a bijection in ``index`` for fixed base."""
    return _mix64(_mix64(base_seed) + (index + 1) * GOLDEN)


def stream_rng(base_seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stream_seed(base_seed, index)))


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "")
    if raw.strip():
        try:
            val = int(raw)
        except ValueError:
            raise InputError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
        return max(val, 1)
    return os.cpu_count() or 1


def sample_size_for_alpha(alpha: float, n: int) -> int:
    """m = round(alpha n)."""
    if alpha <= 0:
        raise InputError("alpha must be positive")
    return int(round(alpha * n))


# ---------------------------------------------------------------- experiments


@dataclass(frozen=True)
class FactorExperiment:
    """PPCA pre-training followed by OLS on the factor features."""

    pop: FactorPopulation
    name: str = "factor"

    @property
    def min_m(self) -> int:
        return self.pop.d + 1

    @property
    def min_n(self) -> int:
        return self.pop.k + 1

    def replicate(self, m: int, n: int, rng: np.random.Generator) -> RiskBreakdown:
        pop = self.pop
        x_pre = sample_factor(pop, m, rng)
        M_hat = ppca_mle(x_pre.T @ x_pre / m, pop.k).matrix
        W = feature_matrix(factor_section(pop, M_hat))
        x = sample_factor(pop, n, rng)
        moments = linear_gaussian_moments(W, pop.sigma_x, pop.w_star)
        return risk_decompose(DesignBlock.from_matrix(x, x @ W.T), x @ pop.w_star, moments, pop.sigma2)


@dataclass(frozen=True)
class SpectralExperiment:
    """Spectral contrastive pre-training followed by OLS on phi(x) = A x."""

    pop: SpectralPopulation
    sigma2: float = 1.0
    fit: FitOptions = field(default_factory=FitOptions)
    name: str = "spectral"

    @property
    def min_m(self) -> int:
        return self.fit.min_samples

    @property
    def min_n(self) -> int:
        return self.pop.k + 1

    def replicate(self, m: int, n: int, rng: np.random.Generator) -> RiskBreakdown:
        pop = self.pop
        pre_rng, fit_rng, down_rng = rng.spawn(3)
        batch = sample_triplets(pop, m, pre_rng)
        opts = FitOptions(**{**self.fit.__dict__, "seed": int(fit_rng.integers(1 << 63))})
        A = fit_descriptor(batch, pop.k, opts).factor
        x = down_rng.standard_normal((n, pop.d)) @ _gaussian_factor(pop.sigma_down).T
        moments = linear_gaussian_moments(A, pop.sigma_down, pop.w_star)
        return risk_decompose(DesignBlock.from_matrix(x, x @ A.T), x @ pop.w_star, moments, self.sigma2)


@dataclass(frozen=True)
class EmpiricalSample:
    values: np.ndarray
    metadata: dict
    records: tuple = ()
    indices: tuple = ()
    failures: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(vals)):
            raise InputError("empirical sample has non-finite values")
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def rows(self) -> list[tuple]:
        """(rep_index, m, n, rep_term, leakage_term, variance_term, excess_scaled) per replication."""
        m, n = self.metadata["m"], self.metadata["n"]
        return [
            (r, m, n, b.n * b.rep, b.n * b.leakage, b.n * b.variance, b.excess_scaled)
            for r, b in zip(self.indices, self.records)
        ]


def run_two_stage(
    model, m: int, n: int, reps: int, base_seed: int, workers: int | None = None, alpha: float | None = None
) -> EmpiricalSample:
    """Simulate n * (R - sigma2) over ``reps`` independent replications.

    Replications that raise a fitting or chart error are excluded and counted;
    reaching 2% failures aborts the run with FitError.
    """
    if reps < 1:
        raise InputError("reps must be at least 1")
    if m < model.min_m or n < model.min_n:
        raise InputError(f"need m >= {model.min_m} and n >= {model.min_n}, got m={m}, n={n}")

    def one(r: int):
        try:
            return model.replicate(m, n, stream_rng(base_seed, r))
        except TwoStageError as exc:
            return exc

    workers = worker_count() if workers is None else max(int(workers), 1)
    if workers == 1:
        results = [one(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, range(reps)))

    ok = [(r, b) for r, b in enumerate(results) if isinstance(b, RiskBreakdown)]
    failures = reps - len(ok)
    if failures >= MAX_FAILURE_RATE * reps and failures > 0:
        first = next(b for b in results if not isinstance(b, RiskBreakdown))
        raise FitError(f"{failures} of {reps} replications failed (first: {first})")
    meta = {"model": model.name, "m": m, "n": n, "alpha": alpha if alpha is not None else m / n, "seed": base_seed}
    return EmpiricalSample(
        np.array([b.excess_scaled for _, b in ok]),
        meta,
        tuple(b for _, b in ok),
        tuple(r for r, _ in ok),
        failures,
    )


# ---------------------------------------------------------------- comparison


QUANTILES = (0.1, 0.5, 0.9)


@dataclass(frozen=True)
class ComparisonReport:
    empirical_mean: float
    law_mean: float
    relative_mean_error: float
    ks_distance: float
    quantiles: tuple
    n_effective: int

    def as_row(self) -> dict:
        row = {
            "n_effective": self.n_effective,
            "empirical_mean": self.empirical_mean,
            "law_mean": self.law_mean,
            "relative_mean_error": self.relative_mean_error,
            "ks_distance": self.ks_distance,
        }
        for q, emp, law in self.quantiles:
            tag = f"q{int(round(100 * q)):02d}"
            row[f"{tag}_empirical"] = emp
            row[f"{tag}_law"] = law
        return row


def compare(sample, law: LimitLaw, law_mc: int = 1_000_000, seed: int = 0) -> ComparisonReport:
    """Mean error, two-sample KS distance against ``law_mc`` law draws, and a quantile table."""
    values = np.asarray(sample.values if isinstance(sample, EmpiricalSample) else sample, dtype=float)
    if values.size == 0:
        raise InputError("empirical sample is empty")
    ref = law_sample(law, law_mc, np.random.default_rng(seed))
    emp_mean = float(values.mean())
    law_mean = law.mean()
    rel = (emp_mean - law_mean) / law_mean if law_mean != 0 else float("inf")
    ks = float(ks_2samp(values, ref).statistic)
    qs = tuple((q, float(np.quantile(values, q)), float(np.quantile(ref, q))) for q in QUANTILES)
    return ComparisonReport(emp_mean, law_mean, rel, ks, qs, int(values.size))


def baseline_alpha0(interaction_mean: float, q0: float) -> float:
    """Sample-ratio threshold E||L(Z)||^2 / q0."""
    if q0 <= 0:
        raise InputError("q0 must be positive")
    return float(interaction_mean) / float(q0)
