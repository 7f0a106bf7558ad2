import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_report(request):
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        results[number] = f"[{number}] {title}: {'PASS' if passed else 'FAIL'} ({detail})"
        print(results[number], flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for number in sorted(results):
            terminalreporter.write_line(results[number])
