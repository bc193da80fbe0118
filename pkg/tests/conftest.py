import copy

import pytest

from ftrecover.config import parse_config

ACCEPTANCE = {
    1: "undo round-trip",
    2: "bubble ratio",
    3: "crash-consistency repair",
    4: "logging replay exactness",
    5: "parallel recovery equivalence",
    6: "upstream-backup sufficiency",
    7: "log GC bound",
    8: "group planner",
    9: "training-time simulation",
    10: "determinism",
}

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n): acceptance criterion number n")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None:
        return
    failed = report.failed
    if report.when == "call" or failed:
        prev = _outcomes.get(marker, True)
        _outcomes[marker] = prev and not failed and not report.skipped


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is not None:
        report.acceptance = mark.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in ACCEPTANCE.items():
        if n in _outcomes:
            status = "PASS" if _outcomes[n] else "FAIL"
        else:
            status = "NOT RUN"
        terminalreporter.write_line(f"criterion {n:2d} {title}: {status}")


BASE = {
    "name": "t",
    "topology": {"machines": 4, "stages": 8, "micro_batches": 4},
    "iterations": 30,
    "checkpoint_interval": 10,
}


def make_config(**overrides):
    raw = copy.deepcopy(BASE)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return parse_config(raw)


@pytest.fixture
def config_factory():
    return make_config
