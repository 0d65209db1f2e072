import pytest

_CRITERION_RESULTS: list[tuple[int, str, bool, str]] = []


class CriterionReporter:
    """Collects acceptance-criterion outcomes for the terminal summary."""

    def record(self, number: int, name: str, passed: bool, detail: str = "") -> None:
        _CRITERION_RESULTS.append((number, name, passed, detail))

    def check(self, number: int, name: str, passed: bool, detail: str = "") -> None:
        self.record(number, name, passed, detail)
        assert passed, f"criterion {number} ({name}): {detail}"


@pytest.fixture(scope="session")
def criteria() -> CriterionReporter:
    return CriterionReporter()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(_CRITERION_RESULTS):
        verdict = "PASS" if passed else "FAIL"
        line = f"criterion {number:>2} [{verdict}] {name}"
        if detail:
            line += f" :: {detail}"
        terminalreporter.write_line(line)
