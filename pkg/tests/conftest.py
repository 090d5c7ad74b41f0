"""Shared pytest hooks: acceptance outcomes are collected and echoed in the terminal summary."""

ACCEPTANCE_RESULTS: dict = {}


def record_acceptance(number: int, title: str, passed: bool, detail: str) -> str:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
