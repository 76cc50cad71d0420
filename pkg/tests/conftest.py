"""Terminal summary for the acceptance suite: one PASS/FAIL line per
criterion, labeled by each test's first docstring line."""

import pytest

_acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when == "call" and item.fspath.basename == "test_acceptance.py":
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _acceptance_results.append((item.nodeid, doc, report.passed))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    seen = set()
    for nodeid, doc, passed in _acceptance_results:
        if nodeid in seen:
            continue
        seen.add(nodeid)
        verdict = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"{verdict}  {doc}")
