import pytest

_RESULTS = {}


def _key(item):
    m = item.get_closest_marker("criterion")
    return (m.args[0], m.args[1]) if m else None


@pytest.fixture
def record(request):
    """record(ok, detail) stores the verdict line for the test's acceptance criterion."""
    key = _key(request.node)

    def _record(ok: bool, detail: str = ""):
        _RESULTS[key] = (bool(ok), detail)
        return ok

    return _record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    key = _key(item)
    if key is None or rep.when != "call":
        return
    if rep.failed and (key not in _RESULTS or _RESULTS[key][0]):
        msg = str(call.excinfo.value).strip().splitlines()[0] if call.excinfo else "failed"
        _RESULTS[key] = (False, (_RESULTS.get(key, (None, ""))[1] + " | " if key in _RESULTS else "") + msg[:200])


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for (num, title), (ok, detail) in sorted(_RESULTS.items()):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
