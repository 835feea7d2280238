"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import pytest

RESULTS: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    entry = RESULTS.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] = entry["passed"] and rep.passed
    entry["details"] += [v for k, v in item.user_properties if k == "measured" and v not in entry["details"]]


@pytest.fixture
def measured(request):
    """Attach a measurement string to the criterion summary line."""
    def record(text: str) -> None:
        request.node.user_properties.append(("measured", text))
    return record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        r = RESULTS[number]
        status = "PASS" if r["passed"] else "FAIL"
        detail = f" [{'; '.join(r['details'])}]" if r["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}: {r['title']}{detail}")
