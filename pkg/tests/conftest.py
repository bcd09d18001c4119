from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_orthogonal(k: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((k, k)))
    return Q * np.sign(np.diag(R))


def random_tangent(U1: np.ndarray, U2: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Symmetric direction with zero lower-right block in the [U1 U2] basis."""
    k = U1.shape[1]
    X = rng.standard_normal((k, k))
    X = X + X.T
    Y = rng.standard_normal((k, U2.shape[1]))
    H = U1 @ X @ U1.T + U1 @ Y @ U2.T + U2 @ Y.T @ U1.T
    return 0.5 * (H + H.T)


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
