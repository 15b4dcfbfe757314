import pytest

from sestrade.metrics import baseline_run
from sestrade.scenario import generate_case_study
from sestrade.stackelberg import iterate
from sestrade.studies import DEFAULT_FRACTIONS

ACCEPTANCE_KEY = pytest.StashKey[dict]()
ACCEPTANCE_COUNT = 10


@pytest.fixture(scope="session")
def reference_scenario():
    return generate_case_study(40, 0.25, seed=0)


@pytest.fixture(scope="session")
def reference_result(reference_scenario):
    return iterate(reference_scenario)


@pytest.fixture(scope="session")
def sweep_runs():
    """(scenario, equilibrium, baseline) for every default fraction."""
    runs = {}
    for f in DEFAULT_FRACTIONS:
        sc = generate_case_study(40, f, seed=0)
        runs[f] = (sc, iterate(sc), baseline_run(sc))
    return runs


@pytest.fixture
def record_criterion(request):
    """Store a one-line verdict for an acceptance criterion."""
    store = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str):
        store[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(ACCEPTANCE_KEY, None)
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in store:
            passed, detail = store[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: FAIL - not evaluated")
