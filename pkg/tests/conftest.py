ACCEPT_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPT_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPT_LINES):
        terminalreporter.write_line(line)
