import pytest

CRITERIA = {
    1: "MVDR correctness",
    2: "detection law",
    3: "FIM oracle",
    4: "gradient suite",
    5: "ADMM consensus",
    6: "feasibility",
    7: "RIS gain",
    8: "closed-form optimality",
    9: "PHR vs plain ALM",
    10: "trade-off monotonicity",
    11: "training sanity",
    12: "determinism",
}
_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def report(request):
    """``report(n, ok, detail)`` records the outcome of acceptance criterion ``n``."""
    results = request.config.stash[_RESULTS]

    def record(n, ok, detail=""):
        results[n] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    ran = any("test_acceptance" in r.nodeid for rs in terminalreporter.stats.values() for r in rs if hasattr(r, "nodeid"))
    if not results and not ran:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in results:
            ok, detail = results[n]
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} C{n:<2} {name}: {detail}")
        elif ran:
            terminalreporter.write_line(f"---- C{n:<2} {name}: not run")
