import numpy as np
import pytest

from deepcp.data_io import generate_synthetic, split_observed


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_data():
    """Rank-2 4x4x4 tensor with half of its entries observed."""
    return split_observed(generate_synthetic((4, 4, 4), 2, 0), 0.5, 0)


ACCEPTANCE_CRITERIA = 10


def pytest_configure(config):
    config.acceptance_lines = {}
    config.acceptance_collected = False


def pytest_collection_modifyitems(config, items):
    config.acceptance_collected = any("test_acceptance" in item.nodeid for item in items)


@pytest.fixture
def acceptance(request):
    """``record(number, passed, text)`` stores the summary line for one criterion."""

    def record(number: int, passed: bool, text: str):
        mark = "PASS" if passed else "FAIL"
        request.config.acceptance_lines[number] = f"criterion {number:>2}: {mark}  {text}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not config.acceptance_collected:
        return
    lines = config.acceptance_lines
    terminalreporter.section("acceptance criteria")
    for number in range(1, ACCEPTANCE_CRITERIA + 1):
        terminalreporter.write_line(lines.get(number, f"criterion {number:>2}: FAIL  (no result recorded)"))
