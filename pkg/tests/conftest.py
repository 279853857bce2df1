import numpy as np
import pytest

from sparseloc import MinkLoc, ModelConfig


TINY_CFG = dict(conv0_ch=2, conv1_ch=2, conv2_ch=2, conv3_ch=2,
                descriptor_dim=3, quantization_step=0.1)

# verdict lines recorded by the acceptance suite, replayed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_model():
    """A minimal backbone: fast enough for per-test forward/backward passes."""
    return MinkLoc(ModelConfig(**TINY_CFG), seed=0)


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """A small synthetic dataset shared across tests (read-only)."""
    from sparseloc import synth_dataset
    root = tmp_path_factory.mktemp("synth")
    synth_dataset(str(root), n_places=4, n_revisits=3, geometry_seed=0,
                  points_per_cloud=256)
    return str(root)
