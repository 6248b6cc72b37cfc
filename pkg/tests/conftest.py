import numpy as np
import pytest

from ashap.detectors import GmmModel, SubspaceModel

ACCEPTANCE_LINES = []


def random_spd(rng, d, jitter=0.5):
    a = rng.normal(size=(d, d))
    return a @ a.T / d + jitter * np.eye(d)


def random_gmm(rng, d, K=2, spread=2.0):
    w = rng.uniform(0.5, 1.5, size=K)
    return GmmModel(w / w.sum(), rng.normal(scale=spread, size=(K, d)),
                    np.stack([random_spd(rng, d) for _ in range(K)]))


def random_subspace(rng, d, q):
    basis, _ = np.linalg.qr(rng.normal(size=(d, q)))
    return SubspaceModel(rng.normal(size=d), basis)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_cluster_gmm6():
    """d=6, two well-separated correlated components."""
    rng = np.random.default_rng(2024)
    d = 6
    cov = np.full((d, d), 0.5) + 0.5 * np.eye(d)
    means = np.stack([np.full(d, -1.5), np.full(d, 1.5)])
    means[1, ::2] = -0.5
    return GmmModel(np.array([0.4, 0.6]), means, np.stack([cov, random_spd(rng, d)]))


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
