import pytest

from trafficloop.config import load_config, shipped_scenario
from trafficloop.core import ApproachSpec, IntersectionSpec

_acceptance = []


@pytest.fixture
def two_way():
    """C=60, no lost time, bounds [7, 50]."""
    return IntersectionSpec(
        id="i0",
        approaches=(ApproachSpec("a1", 0.5), ApproachSpec("a2", 0.5)),
        cycle_length_s=60.0,
        lost_time_s=4.0,
        green_min_s=(7.0, 7.0),
        green_max_s=(50.0, 50.0),
    )


@pytest.fixture(scope="session")
def rush_hour():
    return load_config(shipped_scenario("rush_hour_rain_match"))


@pytest.fixture(scope="session")
def symmetric():
    return load_config(shipped_scenario("symmetric"))


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _acceptance.append((name, report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, outcome in _acceptance:
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{verdict}  {name}")
