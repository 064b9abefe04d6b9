import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from goldendie.synth import SynthConfig, generate

settings.register_profile("default", deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_wafer():
    """256x256 synthetic wafer with raised defect rates."""
    return generate(SynthConfig(size=256, seed=3, rate_dust=200.0, rate_nitride=60.0,
                                rate_resist=60.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one pass/fail line per criterion

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    detail = dict(report.user_properties).get("detail", "")
    passed = report.passed and report.when == "call"
    previous = _CRITERIA.get(number)
    if previous is None or passed is False:
        _CRITERIA[number] = (passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, title, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))
