import numpy as np
import pytest

from minsight.embedding import build_layout
from minsight.geometry import build_surface, sample_nodes
from minsight.simulator import Renderer


@pytest.fixture(scope="session")
def surface():
    return build_surface()


@pytest.fixture(scope="session")
def nodes(surface):
    return sample_nodes(surface, 1350, 7)


@pytest.fixture(scope="session")
def renderer(surface, nodes):
    return Renderer(surface, nodes)


@pytest.fixture(scope="session")
def layout(nodes):
    return build_layout(nodes)


@pytest.fixture(scope="session")
def small_dataset(surface, nodes, layout):
    from minsight.dataset import ProbeProtocol, generate

    return generate(surface, nodes, ProbeProtocol(n_locations=40, seed=3), layout=layout)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
