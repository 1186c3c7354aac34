import pytest

_VERDICTS: list = []


@pytest.fixture
def verdict(capsys):
    """Record (and print) one pass/fail line for an acceptance criterion."""
    def record(number: int, name: str, passed: bool, detail: str = ""):
        line = f"criterion {number} {'PASS' if passed else 'FAIL'}: {name}" + (f" ({detail})" if detail else "")
        _VERDICTS.append((number, line))
        with capsys.disabled():
            print("\n" + line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
