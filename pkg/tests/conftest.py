import re
import sys
from collections import defaultdict

_CRITERION = re.compile(r"test_criterion_(\d+)_")


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: full-scale acceptance run (slow)")


def pytest_terminal_summary(terminalreporter):
    outcome = defaultdict(list)
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            if rep.when != "call" and key == "passed":
                continue
            m = _CRITERION.search(rep.nodeid)
            if m:
                outcome[int(m.group(1))].append(key == "passed")
    if not outcome:
        return
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    details = getattr(mod, "DETAILS", {})
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcome):
        tag = "PASS" if all(outcome[n]) else "FAIL"
        text = "; ".join(details.get(n, []))
        terminalreporter.write_line(f"criterion {n}: {tag}" + (f"  {text}" if text else ""))
