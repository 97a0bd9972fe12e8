import pytest

CRITERIA = range(1, 10)
_results = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_results] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, passed, detail)``."""
    results = request.config.stash[_results]
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(n: int, passed: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        results[n] = line
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash[_results]
    if not results:
        return
    errored = {r.nodeid for r in terminalreporter.stats.get("failed", []) + terminalreporter.stats.get("error", [])}
    terminalreporter.section("acceptance criteria")
    for n in CRITERIA:
        if n in results:
            terminalreporter.write_line(results[n])
        elif any(f"test_criterion_{n}_" in node for node in errored):
            terminalreporter.write_line(f"criterion {n}: FAIL  raised before measuring")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
