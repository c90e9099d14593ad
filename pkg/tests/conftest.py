import re
from pathlib import Path

import pytest

from bilateral.simulator import load_scenario

SCENARIOS = Path(__file__).resolve().parents[1] / "scenarios"
_CRITERION = re.compile(r"test_criterion_(\d+)_")
_summaries = {}


@pytest.fixture(scope="session")
def scenario_path():
    return lambda name: SCENARIOS / name


@pytest.fixture(scope="session")
def scenario():
    return lambda name: load_scenario(SCENARIOS / name)


def pytest_collection_modifyitems(items):
    for item in items:
        m = _CRITERION.match(item.name)
        if m:
            _summaries[item.nodeid] = (int(m.group(1)), (item.function.__doc__ or "").strip())


def pytest_terminal_summary(terminalreporter):
    # one PASS/FAIL line per acceptance criterion that ran
    verdicts = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if getattr(rep, "nodeid", None) not in _summaries:
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            ok = outcome == "passed"
            verdicts[rep.nodeid] = verdicts.get(rep.nodeid, True) and ok
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid in sorted(verdicts, key=lambda k: _summaries[k][0]):
        n, summary = _summaries[nodeid]
        terminalreporter.write_line(f"{'PASS' if verdicts[nodeid] else 'FAIL'} criterion {n}: {summary}")
