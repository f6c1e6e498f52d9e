import numpy as np
import pytest

from probcong import scenario as S
from probcong.flightmodel import propagate_marginals


@pytest.fixture(scope="session")
def corridor():
    return S.gen_corridor()


@pytest.fixture(scope="session")
def corridor_marginals(corridor):
    f = corridor.flights[0]
    return propagate_marginals(f, f.nominal_targets(), corridor.intent, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_configure(config):
    config.acceptance = {}


@pytest.fixture
def record(request):
    """Store ``(passed, detail)`` for an acceptance criterion."""
    def _record(number, passed, detail):
        request.config.acceptance[number] = (bool(passed), detail)
        return passed
    return _record


def pytest_terminal_summary(terminalreporter, config):
    results = getattr(config, "acceptance", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
