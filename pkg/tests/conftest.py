"""Collects acceptance-test outcomes and prints one line per criterion."""

import re
from collections import defaultdict

CRITERIA = {
    1: "published table averages reproduce within 0.005",
    2: "group fusion matches the brute-force oracle within 1e-12 (500 configs)",
    3: "embedding width and final-slice laws hold for every legal config",
    4: "full-pipeline gradients match finite differences below 1e-4",
    5: "rouge-l agrees exactly with an independent LCS oracle (1000 pairs)",
    6: "9:1 split satisfies the partition law across sizes and seeds",
    7: "toy training halves the loss and lifts mcq accuracy by 20+ points",
    8: "connector parameter delta is exactly groups*width*hidden",
    9: "identical train invocations produce byte-identical artifacts",
}

_results = defaultdict(lambda: {"passed": 0, "failed": 0})


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    match = re.search(r"criterion(\d+)", report.nodeid)
    if not match:
        return
    key = int(match.group(1))
    if report.passed:
        _results[key]["passed"] += 1
    elif report.failed:
        _results[key]["failed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(CRITERIA):
        if key not in _results:
            continue
        stats = _results[key]
        status = "PASS" if stats["failed"] == 0 else "FAIL"
        detail = f" ({stats['failed']} of {stats['passed'] + stats['failed']} cases failed)" \
            if stats["failed"] else ""
        terminalreporter.write_line(
            f"criterion {key}: {status} - {CRITERIA[key]}{detail}")
