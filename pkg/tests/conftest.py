"""Prints one pass/fail line per acceptance criterion after the run."""
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _CRITERIA.setdefault(number, {"title": title, "ok": True, "seen": False,
                                          "seconds": 0.0})
            item.user_properties.append(("criterion", number))


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("criterion")
    if number is None:
        return
    entry = _CRITERIA[number]
    entry["seconds"] += report.duration
    if report.when == "call":
        entry["seen"] = True
    if report.failed or (report.when == "call" and report.skipped):
        entry["ok"] = False


def pytest_terminal_summary(terminalreporter):
    ran = {n: e for n, e in _CRITERIA.items() if e["seen"] or not e["ok"]}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ran):
        e = ran[number]
        status = "PASS" if e["ok"] else "FAIL"
        terminalreporter.write_line(
            f"criterion {number:2d}: {status}  {e['title']} ({e['seconds']:.1f} s)")
