import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def verdict(capsys):
    """Record one PASS/FAIL line for an acceptance criterion and print it live."""

    def emit(number, name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'} [{number:2d}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print("\n" + line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: s[6:10]):
            terminalreporter.write_line(line)
