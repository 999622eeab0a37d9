"""Shared test plumbing: the acceptance-criteria scoreboard.

Tests marked ``@pytest.mark.criterion("<name>")`` report into a registry;
the terminal summary prints one PASS/FAIL line per criterion so a run's
verdict is readable at a glance.  Tests attach human-readable evidence
with ``note(name, text)``.
"""

import pytest

CRITERION_ORDER = (
    "gradient-suite",
    "residual-gate-identity",
    "attention-normalization",
    "metric-oracles",
    "scst-zero-gradient",
    "overfit-run",
    "scst-improvement",
    "controllability",
    "determinism",
    "beam-contract",
)

_registry: dict[str, dict] = {}


def note(name: str, text: str) -> None:
    """Attach evidence to a criterion's summary line."""
    _registry.setdefault(name, {"outcome": None, "details": []})
    _registry[name]["details"].append(text)


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(name): marks a test as an acceptance gate")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    name = marker.args[0]
    entry = _registry.setdefault(name, {"outcome": None, "details": []})
    if rep.when == "setup" and (rep.failed or rep.skipped):
        entry["outcome"] = "SKIP" if rep.skipped else "FAIL"
    elif rep.when == "call":
        if rep.passed:
            # never upgrade an earlier failure of the same criterion
            if entry["outcome"] is None:
                entry["outcome"] = "PASS"
        elif rep.skipped:
            if entry["outcome"] is None:
                entry["outcome"] = "SKIP"
        else:
            entry["outcome"] = "FAIL"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _registry:
        return
    tr = terminalreporter
    tr.write_sep("=", "acceptance criteria")
    for name in CRITERION_ORDER:
        entry = _registry.get(name)
        if entry is None or entry["outcome"] is None:
            tr.write_line(f"NOT RUN  {name}")
            continue
        line = f"{entry['outcome']:<8} {name}"
        if entry["details"]:
            line += " — " + "; ".join(entry["details"])
        tr.write_line(line)
    for name in sorted(set(_registry) - set(CRITERION_ORDER)):
        entry = _registry[name]
        tr.write_line(f"{entry['outcome'] or 'NOT RUN':<8} {name}")
