import numpy as np
import pytest
from hypothesis import settings

from coattn.dataset import SynthSpec, generate_synthetic
from coattn.trainer import TrainConfig, train

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

SMALL_SPEC = SynthSpec(images=60, proposals=6, symbols=8, d1=8, d2=10, seed=3)


@pytest.fixture(scope="session")
def small_manifest():
    return generate_synthetic(SMALL_SPEC)


@pytest.fixture(scope="session")
def small_checkpoint(small_manifest):
    cfg = TrainConfig(epochs=2, d_w=8, d_e=8, seed=1)
    return train(small_manifest, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Records one acceptance verdict line, printed again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
