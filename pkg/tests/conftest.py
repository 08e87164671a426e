import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from qpoison import transport as tr  # noqa: E402
from qpoison.config import resolve_config  # noqa: E402

GAMMA_DEVICES = ("gamma-nonmetal", "gamma-cu1", "gamma-cu10", "gamma-ti2")

# wall-clock seconds spent building each session fixture
TIMINGS = {}


def _inject(name):
    rc = resolve_config(name)
    t0 = time.perf_counter()
    led = tr.run_injection(rc.geometry(), rc.transport())
    TIMINGS[name] = time.perf_counter() - t0
    return rc, led


@pytest.fixture(scope="session")
def injection_nonmetal():
    """Six-qubit chip without islands, 10^6 injector phonons."""
    return _inject("inject-nonmetal")


@pytest.fixture(scope="session")
def injection_cu10():
    """Six-qubit chip with 10 um Cu islands, 10^7 injector phonons."""
    return _inject("inject-cu10")


@pytest.fixture(scope="session")
def injection_cu1():
    return _inject("inject-cu1")


@pytest.fixture(scope="session")
def gamma_runs():
    """Dense-grid chips for the four island variants, 10^4 simulated pairs each."""
    out = {}
    t0 = time.perf_counter()
    for name in GAMMA_DEVICES:
        rc = resolve_config(name)
        out[name] = (rc, tr.run_gamma(rc.geometry(), rc.transport(), impact=rc.impact()))
    TIMINGS["gamma"] = time.perf_counter() - t0
    return out
