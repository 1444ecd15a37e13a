import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "parameter counts",
    2: "data-fidelity closed form",
    3: "gradient checks",
    4: "desk-scale training",
    5: "FCSA-MT baseline",
    6: "metrics",
    7: "k-space consistency of deep outputs",
    8: "forward runtime",
    9: "shift robustness",
    10: "mask generation",
}


def pytest_configure(config):
    config._criteria = {n: {"outcomes": [], "notes": []} for n in CRITERIA}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        item.config._criteria[marker.args[0]]["outcomes"].append(rep.outcome)


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the test's criterion summary."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        request.config._criteria[marker.args[0]]["notes"].append(text)
        print(text)

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config._criteria
    if not any(r["outcomes"] for r in rows.values()):
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        outs = rows[n]["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif "failed" in outs:
            status = "FAIL"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        else:
            status = "SKIPPED"
        terminalreporter.write_line(f"criterion {n:2d} ({title}): {status}")
        for text in rows[n]["notes"]:
            terminalreporter.write_line(f"    {text}")
