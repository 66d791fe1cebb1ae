import re

VERDICT = re.compile(r"^criterion \d+: (PASS|FAIL) - .*$", re.M)


def pytest_terminal_summary(terminalreporter):
    # repeat the acceptance verdicts, which are otherwise captured
    lines = []
    for key in ("passed", "failed", "xfailed"):
        for rep in terminalreporter.stats.get(key, []):
            if "test_acceptance" in rep.nodeid and rep.when == "call":
                lines += [m.group(0) for m in VERDICT.finditer(rep.capstdout)]
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
