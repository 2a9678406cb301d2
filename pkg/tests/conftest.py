import numpy as np
import pytest
from hypothesis import settings

from safe_smpc.config import load_paper_config
from safe_smpc.sim import build_syntheses

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60)
settings.load_profile("repo")

# acceptance criteria record one line each here; printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def bench_cfg():
    return load_paper_config()


@pytest.fixture(scope="session")
def bench_syn(bench_cfg):
    syn = build_syntheses(bench_cfg.with_(controller="safe"))
    syn.rmpc.X0_inner  # build once, shared by every test
    return syn


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
