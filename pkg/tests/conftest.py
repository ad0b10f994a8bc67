import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, name): acceptance criterion reported in the summary")
    config._criteria = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    number, name = marker.args
    detail = dict(item.user_properties).get("detail", "")
    item.config._criteria.append((number, name, "PASS" if rep.passed else "FAIL", detail))


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, status, detail in sorted(config._criteria):
        line = f"[{status}] criterion {number:2d}: {name}"
        if detail:
            line += f" ({detail})"
        terminalreporter.write_line(line)
