"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

_results = {}


def pytest_runtest_logreport(report):
    criterion = dict(report.user_properties).get("criterion")
    if criterion is None:
        return
    if report.when == "call" or report.outcome == "failed":
        prev = _results.get(criterion)
        detail = dict(report.user_properties).get("detail", "")
        passed = report.outcome == "passed" and (prev is None or prev[0])
        _results[criterion] = (passed, detail or (prev[1] if prev else ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(_results):
        passed, detail = _results[criterion]
        line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
