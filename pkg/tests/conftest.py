import numpy as np
import pytest


def random_sphere_points(rng, n, lat_lim=90.0):
    """Uniform on the sphere (or on the band |lat| <= lat_lim)."""
    lon = rng.uniform(-180.0, 180.0, n)
    z = rng.uniform(-np.sin(np.radians(lat_lim)), np.sin(np.radians(lat_lim)), n)
    return np.column_stack([lon, np.degrees(np.arcsin(z))])


def random_box_points(rng, n, lon=(-150.0, -140.0), lat=(-5.0, 5.0)):
    return np.column_stack([rng.uniform(*lon, n), rng.uniform(*lat, n)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
