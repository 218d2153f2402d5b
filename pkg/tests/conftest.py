import math

import numpy as np
import pytest

from fibertrap.fields import SR88, DriveConfig, IdealQuadrupole, find_node, get_basis
from fibertrap.geometry import build_paper_trap

OMEGA = 2 * math.pi * 6e6


@pytest.fixture(scope="session")
def layout():
    return build_paper_trap()


@pytest.fixture(scope="session")
def basis(layout):
    return get_basis(layout)


@pytest.fixture(scope="session")
def drive():
    return DriveConfig(omega_rf=OMEGA, v1=125.0, delta=1.0, theta=0.0)


@pytest.fixture(scope="session")
def node(basis, drive):
    return find_node(basis, drive, (0.0, -3.5e-4, 6e-4))


@pytest.fixture(scope="session")
def species():
    return SR88


def quad_voltage(q, r0=5e-4, omega=OMEGA, species=SR88):
    """RF amplitude giving Mathieu q along the unit-curvature axis of the ideal quadrupole."""
    return q * species.mass * r0**2 * omega**2 / (2 * species.charge)


@pytest.fixture(scope="session")
def quad():
    return IdealQuadrupole(center=(0.0, 0.0, 5e-4), r0=5e-4, rf_weights=(-0.5, -0.5, 1.0),
                           dc={"DC1": {"curvature": (1.0, 1.0, -2.0)}, "DCX": {"gradient": (1.0, 0.0, 0.0)}})


def rng(seed=0):
    return np.random.default_rng(seed)
