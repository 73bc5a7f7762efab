import numpy as np
import pytest

from splitgrid.data import synth_generator, agglomerative_cluster
from splitgrid.fedformer import ModelConfig
from splitgrid.protocol import prepare_clients

DESK = ModelConfig(seq_len=48, pred_len=24, d_model=32, d_ff=64, modes=8, decomp_kernel=13)
TINY = ModelConfig(seq_len=16, pred_len=8, d_model=6, d_ff=10, modes=3, decomp_kernel=5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    return DESK


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


def tiny_series(n_clients=4, days=12, seed=0):
    return synth_generator(n_clients, days, "cluster-separable", seed=seed, noise=0.05)


@pytest.fixture(scope="session")
def tiny_federation():
    """Two stations with two clients each, on the tiny model."""
    series = tiny_series()
    nbs = agglomerative_cluster(series, 2)
    return series, nbs, prepare_clients(series, nbs, TINY, stride=2)


# acceptance report ----------------------------------------------------------------
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE_LINES[number] = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
