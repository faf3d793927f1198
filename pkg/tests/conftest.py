import numpy as np
import pytest

from quadjunction.cone import build_weights, embed_cone
from quadjunction.domain import Domain, DomainSpec
from quadjunction.grid import voxelize
from quadjunction.potential import default_potential

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def record():
    """record(criterion, ok, detail): log one pass/fail line and assert."""

    def _record(criterion, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return _record


@pytest.fixture(scope="session")
def sym_weights():
    return build_weights(1, 1, 1, 1)


@pytest.fixture(scope="session")
def sym_cone(sym_weights):
    return embed_cone(sym_weights)


@pytest.fixture(scope="session")
def spec(sym_cone):
    return DomainSpec(sym_cone)


@pytest.fixture(scope="session")
def domain(spec):
    return Domain(spec)


@pytest.fixture(scope="session")
def grid64(domain):
    return voxelize(domain, 64)


@pytest.fixture(scope="session")
def grid128(domain):
    return voxelize(domain, 128)


@pytest.fixture(scope="session")
def pot():
    return default_potential(1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20261014)
