import pytest

from dvk_forge.dosimetry import make_dataset
from dvk_forge.unet import TrainConfig


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(4, seed=1)


@pytest.fixture
def tiny_config():
    return TrainConfig(lr=5e-3, batch_size=8, max_epochs=2, width_divisor=8, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
