import pytest

# (number, title, passed, detail) rows from test_acceptance, printed after the run
ACCEPTANCE: list = []


@pytest.fixture
def verdict():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
