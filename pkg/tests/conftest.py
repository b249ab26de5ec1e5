import pytest

CRITERIA = {
    1: "toy kernel exactness",
    2: "interventional identities",
    3: "intervention asymmetry",
    4: "empirical kernel convergence",
    5: "gradient correctness",
    6: "colored-digit benchmark ordering",
    7: "imperfect intervention parity",
    8: "ball-agent generator statistics",
    9: "metric estimator sanity",
    10: "CLI rerun determinism",
}

_outcomes: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion this test belongs to")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    for n in report.criteria if hasattr(report, "criteria") else ():
        _outcomes.setdefault(n, []).append(report.outcome)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    rep.criteria = [m.args[0] for m in item.iter_markers("criterion")]


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        results = _outcomes.get(n)
        if not results:
            status = "NOT RUN"
        elif all(r == "passed" for r in results):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {n:2d} {status:7s} {name}")


@pytest.fixture(scope="session")
def colored_runs():
    """Ten seeds of ACIA, worst-env ERM and ACIA under alpha = 0.5, trained once
    per session and shared by the benchmark-style checks."""
    import protocol

    cache = {}

    def get(kind):
        if kind not in cache:
            if kind == "acia":
                cache[kind] = [protocol.run(s, acia=True) for s in protocol.SEEDS]
            elif kind == "erm":
                cache[kind] = [protocol.run(s, acia=False) for s in protocol.SEEDS]
            elif kind == "imperfect":
                cache[kind] = [protocol.run(s, acia=True, alpha=0.5) for s in protocol.SEEDS]
            else:
                raise KeyError(kind)
        return cache[kind]

    return get
