"""Weighted chi-square limit laws: a constant plus independent scaled chi-squares."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class LimitLaw:
    constant: float
    components: tuple[tuple[float, int], ...] = ()

    def __post_init__(self):
        comps = tuple((float(w), int(k)) for w, k in self.components)
        for w, k in comps:
            if not np.isfinite(w) or w < 0:
                raise InputError(f"component weight {w} must be finite and nonnegative")
            if k < 1:
                raise InputError(f"component dof {k} must be at least 1")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "constant", float(self.constant))

    def mean(self) -> float:
        return self.constant + sum(w * k for w, k in self.components)

    def variance(self) -> float:
        return sum(2.0 * w * w * k for w, k in self.components)

    @property
    def interaction_mean(self) -> float:
        return self.mean() - self.constant

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        return law_sample(self, count, rng)

    @classmethod
    def from_weights(cls, constant: float, weights) -> "LimitLaw":
        """Merge equal weights (to 1e-12 relative) into single multi-dof components."""
        comps: list[list] = []
        for w in sorted((float(w) for w in weights), reverse=True):
            if comps and abs(comps[-1][0] - w) <= 1e-12 * max(abs(w), 1e-300):
                comps[-1][1] += 1
            else:
                comps.append([w, 1])
        return cls(constant, tuple((w, k) for w, k in comps))


def law_sample(law: LimitLaw, count: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise InputError("count must be at least 1")
    out = np.full(count, law.constant)
    for w, k in law.components:
        out += w * rng.chisquare(k, size=count)
    return out
