import re

_CRITERION = re.compile(r"test_criterion_(\d+)")
_results: dict[int, list[tuple[str, str]]] = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        _results.setdefault(int(m.group(1)), []).append((report.nodeid.split("::")[-1], report.outcome))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        outcomes = [o for _, o in _results[n]]
        verdict = "PASS" if all(o == "passed" for o in outcomes) else \
            "SKIP" if all(o == "skipped" for o in outcomes) else "FAIL"
        failed = [name for name, o in _results[n] if o == "failed"]
        note = f"  ({', '.join(failed)})" if failed else ""
        terminalreporter.write_line(f"criterion {n}: {verdict}{note}")
