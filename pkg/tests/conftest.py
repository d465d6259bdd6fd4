import pytest

CRITERIA = {
    1: "ODE vs closed form, multiplicative kernel",
    2: "ODE vs closed form, limited aggregations",
    3: "fixed-point residuals for theta and eta",
    4: "gelation times",
    5: "Borel law of the multiplicative coalescent",
    6: "subcritical terminal concentrations",
    7: "edge-rooted cluster sizes vs Dwass",
    8: "supercritical limits and criticality of the solution",
    9: "conservation of mass",
    10: "byte-identical reruns",
}

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Store the outcome of an acceptance criterion, then assert it."""
    def _record(number: int, passed: bool, detail: str):
        RESULTS[number] = (bool(passed), detail)
        assert passed, f"criterion {number} failed: {detail}"
    return _record


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k, name in CRITERIA.items():
        if k in RESULTS:
            ok, detail = RESULTS[k]
            terminalreporter.write_line(f"criterion {k:2d} {'PASS' if ok else 'FAIL'}  {name}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {k:2d} NOT RUN  {name}")
