import numpy as np
import pytest
from hypothesis import settings

from lmsbi.market import MarketSpec
from lmsbi.synth import SynthConfig, generate_market

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def random_spec(gen, n=None, zmax=50):
    n = int(gen.integers(1, 9)) if n is None else n
    P = gen.random((n, n)) + 1e-3
    P /= P.sum(axis=1, keepdims=True)
    return MarketSpec(n=n, z=gen.integers(1, zmax + 1, n), p=gen.random(n), P=P)


@pytest.fixture
def market10():
    return generate_market(SynthConfig(n=10, seed=1))


@pytest.fixture
def two_node():
    return MarketSpec(n=2, z=np.array([10, 20]), p=np.array([0.9, 0.0]), P=np.array([[0.5, 0.5], [0.5, 0.5]]))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; lines print in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, name, passed, detail):
        lines.append((number, f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(lines, key=lambda x: x[0]):
            terminalreporter.write_line(line)
