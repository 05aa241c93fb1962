import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

DATA = Path(__file__).parent / "data"

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            number, title = mark.args
            _criteria.setdefault(number, {"title": title, "outcomes": [], "details": []})


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for key, value in report.user_properties:
        if key == "criterion":
            _criteria[value]["outcomes"].append(report.outcome)
        elif key == "criterion_detail":
            number, text = value
            _criteria[number]["details"].append(text)


@pytest.fixture(autouse=True)
def _tag_criterion(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args[0])


@pytest.fixture
def detail(request, record_property):
    """Attach a one-line measurement to the test's acceptance criterion."""
    mark = request.node.get_closest_marker("criterion")

    def add(text: str):
        record_property("criterion_detail", (mark.args[0], text))

    return add


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        outcomes = entry["outcomes"]
        if not outcomes:
            status = "NOT RUN"
        elif all(o == "passed" for o in outcomes):
            status = "PASS"
        elif any(o == "failed" for o in outcomes):
            status = "FAIL"
        else:
            status = "SKIP"
        line = f"criterion {number:2d} {status:7s} {entry['title']}"
        if entry["details"]:
            line += "  [" + "; ".join(entry["details"]) + "]"
        tr.write_line(line)
