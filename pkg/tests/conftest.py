import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for mark in report.keywords:
        if mark.startswith("criterion_"):
            detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
            _ACCEPTANCE[int(mark.split("_")[1])] = (report.outcome, report.duration, detail)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.keywords[f"criterion_{m.args[0]}"] = True


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number n")
    config.addinivalue_line("markers", "slow: long-running benchmark")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        outcome, dur, detail = _ACCEPTANCE[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        tr.write_line(f"criterion {n:2d}: {status}  {dur:6.1f}s  {detail}")
