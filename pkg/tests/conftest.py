import re

CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)$")


def pytest_terminal_summary(terminalreporter):
    results = {}
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            m = CRITERION.search(getattr(report, "nodeid", ""))
            if m and (report.when == "call" or outcome != "passed"):
                key = (int(m.group(1)), m.group(2))
                if results.get(key) != "FAIL":
                    results[key] = "PASS" if outcome == "passed" else "FAIL"
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, name), verdict in sorted(results.items()):
        terminalreporter.write_line(f"{verdict}  criterion {number}: {name.replace('_', ' ')}")
