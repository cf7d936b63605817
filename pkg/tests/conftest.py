import pytest

# criterion number -> (passed, summary line); filled by the acceptance tests
ACCEPTANCE = {}


@pytest.fixture
def record():
    def _record(number, passed, message):
        ACCEPTANCE[number] = (bool(passed), message)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} {message}")
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, message = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {message}")
