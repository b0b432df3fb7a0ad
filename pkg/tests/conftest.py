import numpy as np
import pytest

from dybo_gmsfem.grid import build_grids
from dybo_gmsfem.media import EXAMPLE1_FLUCTUATIONS, CoefficientModel, high_contrast_mean, trig_field

# criterion id -> (passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE: dict = {}


def record(key: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE[key] = (bool(passed), detail)
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0].rstrip("ab")), k)):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_grid():
    return build_grids(4, 5)


@pytest.fixture(scope="session")
def small_model(small_grid):
    g = small_grid
    abar = high_contrast_mean(g, 2, 4.0, 100.0, seed=3)
    return CoefficientModel(abar, [trig_field(g, *s) for s in EXAMPLE1_FLUCTUATIONS])
