import numpy as np
import pytest

from covertsense.errors import ModelError
from covertsense.models import HypothesisModel

ACCEPTANCE_LINES: list[str] = []


def random_model(rng: np.random.Generator, k: int) -> HypothesisModel:
    """Random well-posed categorical model with ``k`` effective actions."""
    while True:
        h = int(rng.integers(2, 4))
        y = int(rng.integers(k + 1, k + 3))
        alice = np.empty((h, k + 1, y))
        alice[:, 0] = rng.dirichlet(np.ones(y))
        alice[:, 1:] = rng.dirichlet(np.ones(y), size=(h, k))
        willie = np.empty((h, k + 1, y))
        willie[:, 0] = rng.dirichlet(np.full(y, 2.0))
        willie[:, 1:] = rng.dirichlet(np.ones(y), size=(h, k))
        try:
            return HypothesisModel(tuple("abc"[:h]), alice, willie)
        except ModelError:
            continue


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
