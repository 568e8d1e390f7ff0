import pytest

_acceptance = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    # keep the worst phase outcome (setup/call/teardown) per criterion
    if rep.when == "call" or rep.outcome != "passed":
        prev = _acceptance.get(item.nodeid)
        if prev is None or prev[1] == "passed":
            _acceptance[item.nodeid] = (mark.args[0], rep.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _acceptance.values():
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{status}  {label}")
