import numpy as np
import pytest

from safeite.mapgen import generate_map

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(number: int, passed: bool, detail: str) -> None:
    line = f"ACCEPTANCE {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_map():
    """A quickly generated map; fine for anything that is not a statistic."""
    return generate_map(11, budget=4000, init_count=500)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
