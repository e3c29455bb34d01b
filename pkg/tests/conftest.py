import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")

# masses away from the gap closings at |m| = 0, 2
NONTRIVIAL = (-1.5, -1.0, -0.5, 0.5, 1.0, 1.5)
TRIVIAL = (-4.0, -3.0, 3.0, 4.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def replica_m1():
    """Zero-noise replica on the 20x20 grid at m = 1 (slow schedule)."""
    from eulertopo import bloch, labsim

    grid = bloch.BZGrid(20, 20)
    results, u3 = labsim.measure_grid(1.0, grid, labsim.Schedule(), labsim.NO_NOISE, seed=0)
    return grid, results, u3
