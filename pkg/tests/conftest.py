import pytest

from qwalk.coeffs import PointMass, RunningMaxVolatility, WalkSpec


@pytest.fixture
def brownian():
    return WalkSpec("0", "1", {}, PointMass(0.0))


@pytest.fixture
def line():
    return WalkSpec("1", "0", {}, PointMass(0.0))


@pytest.fixture
def ou():
    return WalkSpec("-theta*x", "0.5", {"theta": 1.0}, PointMass(0.0))


@pytest.fixture
def non_markov():
    return WalkSpec("0", "1", {}, PointMass(0.0), RunningMaxVolatility(0.5, 1.0))


_LINES_KEY = pytest.StashKey[dict]()


@pytest.fixture
def record_criterion(request):
    """Record one verdict line per acceptance criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_LINES_KEY, {})

    def record(number: int, ok: bool, detail: str) -> None:
        lines[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES_KEY, {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
