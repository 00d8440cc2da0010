import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pspclab import ImageDataset, make_synthetic_dataset  # noqa: E402


def pixel_dataset(values):
    return ImageDataset(np.asarray(values, dtype=np.float64).reshape(-1, 1, 1, 1))


@pytest.fixture
def three_pixel():
    return pixel_dataset([-1.0, 0.0, 1.0])


@pytest.fixture
def small_gray():
    """Six 4x4 grayscale images with smooth structure."""
    return make_synthetic_dataset(6, 4, 4, 1, kind="smooth", seed=11, smoothness=1.0)


@pytest.fixture
def small_rgb():
    return make_synthetic_dataset(5, 5, 5, 3, kind="smooth", seed=5, smoothness=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS):
        terminalreporter.write_line(line)
