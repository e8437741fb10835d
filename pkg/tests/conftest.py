import numpy as np
import pytest
from hypothesis import settings

from robustface.dataset import generate_synthetic
from robustface.model import EncoderConfig

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_ds():
    """4 identities x 4 images of 6x6 pixels: fast enough for full training loops."""
    return generate_synthetic(num_identities=4, images_per_identity=4, height=6, width=6, seed=3)


@pytest.fixture(scope="session")
def tiny_encoder():
    return EncoderConfig(input_dim=36, hidden_dims=(16,), embed_dim=8, project_dim=4)


@pytest.fixture(scope="session")
def tiny_dual_encoder():
    return EncoderConfig(input_dim=36, hidden_dims=(16,), embed_dim=8, project_dim=4, use_dual_norm=True)


acceptance_key = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    lines = request.config.stash.setdefault(acceptance_key, [])

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
        lines.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(acceptance_key, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda t: t[0]):
            terminalreporter.write_line(line)
