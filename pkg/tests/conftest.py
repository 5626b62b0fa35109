import numpy as np
import pytest

from ap3d.tensorcore import get_default_dtype, set_default_dtype


@pytest.fixture(autouse=True)
def _double_precision():
    """Every test starts in float64, whatever a previous test switched to."""
    prev = get_default_dtype()
    set_default_dtype(np.float64)
    yield
    set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
