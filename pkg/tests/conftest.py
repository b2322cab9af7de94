import re

_CRITERION = re.compile(r"test_criterion_(\d+)_")
_results: dict[int, tuple[str, str]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    n = int(m.group(1))
    prev, title = _results.get(n, ("NOT RUN", ""))
    if report.failed:
        status = "FAIL"
    elif report.skipped:
        status = "FAIL" if prev == "FAIL" else "SKIP"
    elif report.when == "call":
        status = prev if prev in ("FAIL", "SKIP") else "PASS"
    else:
        return
    _results[n] = (status, title)


def pytest_collection_modifyitems(items):
    for item in items:
        m = _CRITERION.search(item.nodeid)
        if m:
            doc = (item.function.__doc__ or "").strip().splitlines()
            _results.setdefault(int(m.group(1)), ("NOT RUN", doc[0] if doc else ""))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, title = _results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status:7s} {title}")
