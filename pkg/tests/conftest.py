import pytest


@pytest.fixture
def criteria_log(request):
    """Collects ``(number, passed, detail)`` for the acceptance summary."""
    config = request.config
    if not hasattr(config, "_acceptance_results"):
        config._acceptance_results = {}
    return config._acceptance_results


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_acceptance_results", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        passed, detail = results[n]
        terminalreporter.write_line(f"CRITERION {n:>2}: {'PASS' if passed else 'FAIL'} | {detail}")
