import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
CRITERIA = {}


@pytest.fixture
def criterion():
    def record(number, passed, detail=""):
        CRITERIA[number] = (bool(passed), detail)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
