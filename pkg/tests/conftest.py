import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or rep.failed:
        prev = _ACCEPTANCE.get(n, (title, True, ""))
        ok = prev[1] and rep.passed
        detail = prev[2] or getattr(item, "acceptance_detail", "")
        _ACCEPTANCE[n] = (title, ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {title}"
        if detail:
            line += f" [{detail}]"
        terminalreporter.write_line(line)
