import numpy as np
import pytest

from jointcrf import evalmetrics as em

# Lines collected by test_acceptance.py and echoed in the terminal summary.
ACCEPTANCE_LINES = []

# (x0, y0, x1, y1) of the textureless band in the band scene, inclusive.
BAND = (52, 0, 76, 127)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def two_layer():
    """Default two-layer scene: foreground (6, 0), background (-2, 0)."""
    return em.synthetic_pair(em.SyntheticSpec(noise_sigma=0.0))


@pytest.fixture(scope="session")
def band_scene():
    """Two-layer scene with a textureless band inside the foreground and noise 0.01."""
    spec = em.SyntheticSpec(noise_sigma=0.01, textureless_band=BAND)
    pair = em.synthetic_pair(spec)
    score = em.perturbed_score_map(pair.mask, sigma=5.0, flip_fraction=0.1, seed=0)
    return pair, score


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
