import pytest

_VERDICTS = []


class Verdicts:
    """Collects one PASS/FAIL/SKIP line per acceptance criterion."""

    def record(self, number: int, passed, detail: str):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"criterion {number}: {status}  {detail}"
        _VERDICTS.append((number, line))
        print(line, flush=True)


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
