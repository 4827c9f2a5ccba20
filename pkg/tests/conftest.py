import numpy as np
import pytest

from hazeforge.config import RunConfig
from hazeforge.pipeline import make_samples, to_split

# Lines recorded by the acceptance suite, echoed in the terminal summary so
# they survive output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_config():
    """Small enough that a handful of training steps take well under a second."""
    return RunConfig(
        n_images=4, draws=2, image_size=32, depth=5, test_fraction=0.25,
        batch_size=2, stage1_iters=3, stage2_iters=3, seed=3,
    )


@pytest.fixture(scope="session")
def tiny_splits(tiny_config):
    train, test = make_samples(tiny_config)
    return to_split(train), to_split(test)
