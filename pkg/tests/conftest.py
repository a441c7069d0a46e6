import numpy as np
import pytest

from fedcrop.data import ImageSet, PoisonSpec, TriggerPattern, load_synthetic
from fedcrop.models import ModelSpec, ParameterVector


@pytest.fixture(scope="session")
def tiny_data():
    """Small synthetic train/test split at 16x16."""
    return load_synthetic(400, 200, seed=0)


@pytest.fixture
def spec16():
    return ModelSpec("smallcnn", 3, 16, 10)


@pytest.fixture
def corner_poison():
    return PoisonSpec(TriggerPattern.patch((3, 16, 16)), target_label=0, fraction=0.1)


def random_images(rng, n, c=3, h=8, w=8, n_classes=4):
    x = rng.uniform(0, 1, size=(n, c, h, w)).astype(np.float32)
    y = rng.integers(0, n_classes, size=n)
    return ImageSet(x, y, n_classes)


def flat(values, name="w"):
    values = np.asarray(values, dtype=np.float64)
    return ParameterVector(values, [(name, values.shape)])


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
