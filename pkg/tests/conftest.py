import pytest

# criterion id -> list of (test id, passed, note)
_CRITERIA: dict[str, list] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        note = ""
        if not rep.passed:
            note = str(getattr(call.excinfo, "value", "")).strip().splitlines()[0:1]
            note = note[0][:160] if note else rep.outcome
        _CRITERIA.setdefault(str(marker.args[0]), []).append((item.name, rep.passed, note))


def _order(cid):
    head = "".join(c for c in cid if c.isdigit())
    return int(head or 0), cid


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_CRITERIA, key=_order):
        results = _CRITERIA[cid]
        ok = all(p for _, p, _ in results)
        line = f"criterion {cid}: {'PASS' if ok else 'FAIL'} ({sum(p for _, p, _ in results)}/{len(results)})"
        notes = [f"{name}: {note}" for name, p, note in results if not p]
        if notes:
            line += " " + "; ".join(notes)
        terminalreporter.write_line(line)
