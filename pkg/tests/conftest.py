def pytest_terminal_summary(terminalreporter):
    reports = []
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance.py::test_criterion_" in getattr(rep, "nodeid", "") and rep.when == "call":
                reports.append(rep)
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for rep in sorted(reports, key=lambda r: int(r.nodeid.split("test_criterion_")[1].split("_")[0])):
        name = rep.nodeid.split("::")[-1]
        detail = dict(rep.user_properties).get("result", "")
        terminalreporter.write_line(f"{'PASS' if rep.passed else 'FAIL'} {name} {detail}".rstrip())
