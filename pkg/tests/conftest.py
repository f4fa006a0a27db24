import numpy as np
import pytest

from fairlatent.flow import FlowModel


def perturb(model: FlowModel, rng: np.random.Generator, scale: float = 0.3) -> FlowModel:
    """Randomise every parameter so couplings and actnorms are far from identity."""
    for p in model.parameters().values():
        p.data = p.data + scale * rng.standard_normal(p.data.shape)
    model.set_initialized(True)
    return model


def fd_jacobian(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    d = x.size
    J = np.empty((d, d))
    for i in range(d):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        J[:, i] = (fn(xp) - fn(xm)) / (2 * h)
    return J


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def random_flow(rng):
    def make(dim=4, n_blocks=3, hidden=16, seed=0, scale=0.3):
        return perturb(FlowModel(dim, n_blocks, hidden, 2, seed=seed), np.random.default_rng(seed + 100), scale)

    return make


# one line per acceptance criterion, collected by tests/test_acceptance.py
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
