import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_fleet():
    from fedwind.data import SyntheticFleetConfig, generate_synthetic_fleet

    return generate_synthetic_fleet(SyntheticFleetConfig(n_turbines=4, n_scarce=2, rows_per_turbine=8000, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA: dict = {}
_SPENT = pytest.StashKey[list]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    spent = item.stash.setdefault(_SPENT, [0.0])
    spent[0] += report.duration
    if report.when == "call" or (report.when == "setup" and (report.failed or report.skipped)):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        _CRITERIA[number] = (text, status, spent[0])


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, status, seconds = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2} {status}  {text}  ({seconds:.2f}s)")
