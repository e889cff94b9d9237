import pytest

# (criterion number, passed, detail) lines collected by test_acceptance
ACCEPTANCE: list[tuple[int, str, str]] = []


@pytest.fixture
def report():
    def add(number: int, passed: bool | None, detail: str):
        status = "REPORT" if passed is None else ("PASS" if passed else "FAIL")
        ACCEPTANCE.append((number, status, detail))

    return add


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:2d}: {status:6s} {detail}")
