import re

ACCEPTANCE: dict[str, tuple[str, bool]] = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_(ac\d)_(\w+)", report.nodeid)
    if not m:
        return
    key = m.group(1).upper()
    failed = report.failed or (report.when == "call" and report.skipped)
    title, ok = ACCEPTANCE.get(key, (m.group(2).replace("_", " "), True))
    ACCEPTANCE[key] = (title, ok and not failed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        title, ok = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}  {title}")
