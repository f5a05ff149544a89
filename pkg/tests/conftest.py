import numpy as np
import pytest

from ipac.arraymodel import ProbeGeometry, PulseSpec, TransmitScheme
from ipac.wavemodel import ScattererScene

C = 1540.0


@pytest.fixture
def geom():
    return ProbeGeometry(8, 0.1e-3, 0.08e-3, 1.5e-3, 8e-3)


@pytest.fixture
def pulse():
    return PulseSpec(15.625e6, 0.67, 3, 62.5e6)


@pytest.fixture
def scheme():
    return TransmitScheme("plane_wave", tuple(np.deg2rad([-4.0, 0.0, 4.0])))


@pytest.fixture
def scene():
    return ScattererScene([[-0.2e-3, 3e-3], [0.1e-3, 3.5e-3], [0.3e-3, 4.2e-3]], [1.0, 0.7, 0.5])


def random_instance(rng, n_min=4, n_max=8, s_min=3, s_max=5):
    """Random Hermitian-free complex propagator ``H`` and complex ``u``."""
    n = int(rng.integers(n_min, n_max + 1))
    s = int(rng.integers(s_min, s_max + 1))
    T = rng.normal(size=(n, s)) + 1j * rng.normal(size=(n, s))
    R = rng.normal(size=(n, s)) + 1j * rng.normal(size=(n, s))
    gamma = rng.uniform(0.2, 1.0, s)
    u = rng.normal(size=n) + 1j * rng.normal(size=n)
    return T, R, gamma, u


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)``: log one criterion outcome and assert it."""
    def record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.acceptance_lines.append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
