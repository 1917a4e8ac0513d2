import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cryojoint.forward import DetectorGrid, build_psi_tables

warnings.filterwarnings("ignore", message=".*TBB.*")

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def tables16():
    """Tables for an 8^3 volume on a 16 x 16 detector (projections fully contained)."""
    return build_psi_tables(grid=DetectorGrid(16))


@pytest.fixture(scope="session")
def tables8():
    return build_psi_tables(grid=DetectorGrid(8))


def random_pose(rng, shift=1.5):
    return np.array([rng.uniform(0, 2 * np.pi), rng.uniform(0.1, np.pi - 0.1), rng.uniform(0, 2 * np.pi), *rng.uniform(-shift, shift, 2)])


def random_volume(rng, n=8, radius=None):
    """Random coefficients confined to a central ball so projections stay on the detector."""
    c = rng.standard_normal((n, n, n))
    x = np.arange(n) - n // 2
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    r = np.sqrt(X**2 + Y**2 + Z**2)
    return c * (r <= (n / 2 - 1 if radius is None else radius))


ACCEPTANCE_REPORT: dict = {}


def report(key: str, ok: bool, detail: str) -> None:
    """Record one summary line; printed at the end of the session."""
    ACCEPTANCE_REPORT[key] = f"{key}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE_REPORT[key])


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_REPORT:
        return
    terminalreporter.section("acceptance summary")
    for key in sorted(ACCEPTANCE_REPORT, key=lambda k: (not k.startswith("criterion"), len(k), k)):
        terminalreporter.write_line(ACCEPTANCE_REPORT[key])
