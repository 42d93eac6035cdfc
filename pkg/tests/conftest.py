"""Prints one pass/fail line per acceptance criterion after the run."""
import pytest

CRITERIA = [
    "Table-1 reproduction",
    "Augmentation identity",
    "Moment-matching exactness",
    "Small-instance coordinate-ascent oracle",
    "Gradient checks",
    "PTN moment oracle",
    "Unseen-condition prediction",
    "Binomial variant",
    "Determinism",
]

_items = {}
_outcomes = {}
_notes = {}


@pytest.fixture
def note(request):
    """``note(text)`` attaches a measured value to the test's criterion line."""
    name = _items.get(request.node.nodeid)

    def add(text):
        _notes.setdefault(name, []).append(text)

    return add


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion covered by the test")


def pytest_collection_modifyitems(session, config, items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            _items[item.nodeid] = mark.args[0]


def pytest_runtest_logreport(report):
    name = _items.get(report.nodeid)
    if name is None:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _outcomes.get(name, True)
    if report.when == "call" or report.failed:
        _outcomes[name] = prev and not failed


def pytest_terminal_summary(terminalreporter):
    if not _items:
        return
    terminalreporter.section("acceptance criteria")
    for name in CRITERIA:
        if name not in _outcomes:
            if name in _items.values():
                terminalreporter.write_line(f"NOT RUN  {name}")
            continue
        terminalreporter.write_line(f"{'PASS' if _outcomes[name] else 'FAIL'}     {name}")
        for text in _notes.get(name, []):
            terminalreporter.write_line(f"         {text}")
