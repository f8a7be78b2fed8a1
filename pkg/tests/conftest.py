import pytest

_LINES: list[str] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.fixture
def acceptance(request):
    """Record the PASS/FAIL line of the criterion a test covers.

    Call ``acceptance(ok, detail)`` once the measurement is in; a test that
    errors before reporting is listed as FAIL.
    """
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    seen = []

    def report(ok: bool, detail: str):
        seen.append(ok)
        line = f"criterion {number} {'PASS' if ok else 'FAIL'} | {title} | {detail}"
        _LINES.append(line)
        print(line)
        assert ok, line

    yield report
    if not seen:
        _LINES.append(f"criterion {number} FAIL | {title} | test errored before reporting")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
