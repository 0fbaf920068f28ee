import helpers


def pytest_terminal_summary(terminalreporter):
    results = helpers.ACCEPTANCE_RESULTS
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:>2}. {title}: {detail}")
