import math

import numpy as np
import pytest

from aberrsim.optics import LensPrescription, Surface, reference_lens


@pytest.fixture(scope="session")
def singlet():
    return reference_lens("singlet")


@pytest.fixture(scope="session")
def mos_s1():
    return reference_lens("mos_s1")


@pytest.fixture(scope="session")
def mos_s2():
    return reference_lens("mos_s2")


@pytest.fixture
def thin_lens():
    """Symmetric c = +-0.01 singlet with dispersion-free n = 1.5 and negligible thickness."""
    return LensPrescription(
        surfaces=(
            Surface(0.01, 1e-6, 20.0, n_d=1.5, abbe=math.inf),
            Surface(-0.01, 0.0, 20.0),
        ),
        max_half_fov_deg=10.0,
        aperture_radius_mm=5.0,
        image_distance_mm=100.0,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
