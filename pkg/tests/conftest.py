import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from histovl.numerics.rng import SeededRng

# Derandomized so two runs of the suite draw identical examples.
settings.register_profile("repo", derandomize=True, database=None, deadline=None, print_blob=False,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

SESSION_START = time.monotonic()


def pytest_collection_modifyitems(session, config, items):
    # The acceptance suite goes last so its final check sees the whole run.
    items.sort(key=lambda it: "test_acceptance.py" in it.nodeid)


@pytest.fixture
def rng():
    return SeededRng(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


# (criterion, passed, detail) rows appended by the acceptance suite
CRITERIA = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in CRITERIA:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
