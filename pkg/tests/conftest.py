import pytest

_VERDICTS: list[str] = []


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(self, criterion: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}")
        print(_VERDICTS[-1])
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in _VERDICTS:
            terminalreporter.write_line(line)
