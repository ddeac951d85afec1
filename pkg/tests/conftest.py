import numpy as np
import pytest

from svpfrnn.pretrain import PretrainConfig, pretrain_model
from svpfrnn.svmodel import PAPER_PARAMS, generate_dataset


@pytest.fixture(scope="session")
def pretrained():
    """Default-config pretrained model and its grid report (about half a minute)."""
    return pretrain_model(PAPER_PARAMS, PretrainConfig(seed=0))


@pytest.fixture(scope="session")
def small_dataset():
    return generate_dataset(PAPER_PARAMS, 30, 40, seed=3, split_sizes=(20, 5, 5))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one ``PASS``/``FAIL`` line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(tag: str, ok: bool, detail: str) -> bool:
        line = f"{tag:<5} {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s[2:5].strip())):
            terminalreporter.write_line(line)
