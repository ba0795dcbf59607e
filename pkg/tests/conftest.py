import functools

import pytest

from sls_lqg.experiments import design_output_feedback
from sls_lqg.system import ExperimentConfig, build_chain_network, build_graph

ACCEPTANCE_LINES: list[str] = []


@functools.lru_cache(maxsize=None)
def chain(N: int, r_scale: float = 300.0):
    return build_chain_network(N, 0.6, 1.0, 1.0, r_scale)


@functools.lru_cache(maxsize=None)
def design(N: int, d: int, T: int = 200, r_scale: float = 300.0):
    return design_output_feedback(chain(N, r_scale), d, T)


@pytest.fixture
def defaults():
    return ExperimentConfig()


@pytest.fixture(scope="session")
def chain5():
    sys = chain(5)
    return sys, build_graph(sys)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
