import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")

# (criterion number, title, passed, detail) appended by tests/test_acceptance.py
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, passed, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: (r[0], r[1])):
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{status}] {num:>2}. {title}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
