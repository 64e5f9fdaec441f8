_results: dict[str, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    name = dict(report.user_properties).get("criterion")
    if name is None:
        return
    detail = dict(report.user_properties).get("detail", "")
    _results[name] = {"passed": report.passed, "detail": detail}


def pytest_runtest_setup(item):
    marker = item.get_closest_marker("criterion")
    if marker:
        item.user_properties.append(("criterion", marker.args[0]))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, r in _results.items():
        status = "PASS" if r["passed"] else "FAIL"
        line = f"{status}  {name}"
        if r["detail"]:
            line += f"  ({r['detail']})"
        terminalreporter.write_line(line)
