from __future__ import annotations

from importlib import resources

import pytest

from scpo.mdp.io import load_mdp


@pytest.fixture
def data_dir():
    return resources.files("scpo") / "data"


@pytest.fixture
def plateau_peak(data_dir):
    return load_mdp(data_dir / "plateau_peak.mdp")


_CRITERIA: dict[int, tuple[str, str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or not (report.when == "call" or report.failed or report.skipped):
        return
    number, name = marker.args
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    _CRITERIA[number] = (name, status, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        name, status, detail = _CRITERIA[number]
        line = f"criterion {number:2d} {name}: {status}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
