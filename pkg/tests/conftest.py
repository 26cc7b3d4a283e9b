"""Shared models and Monte Carlo settings for the test suite."""

import numpy as np
import pytest

from bspde_mc.characteristics import SimConfig
from bspde_mc.model import preset_model
from bspde_mc.solver import GridSpec, TerminalData


# Desk-scale settings: a few thousand paths, bridge correction on.
FAST = SimConfig(step_h=2e-3, path_count=4000, base_seed=11, bridge_correction=True)


def sine_terminal(domain):
    """sin(pi (x - r1) / (r2 - r1)), vanishing on both ends of an interval."""
    width = domain.r2 - domain.r1
    return TerminalData.create(lambda y: np.sin(np.pi * (y[:, 0] - domain.r1) / width), domain)


def bump_terminal(domain):
    """(x - r1)(r2 - x)."""
    return TerminalData.create(lambda y: (y[:, 0] - domain.r1) * (domain.r2 - y[:, 0]), domain)


@pytest.fixture
def heat():
    return preset_model("heat")


@pytest.fixture
def brownian():
    return preset_model("brownian")


@pytest.fixture
def gbm():
    return preset_model("gbm")


@pytest.fixture
def heat_grid(heat):
    coeffs, domain = heat
    return GridSpec.uniform(domain, coeffs.T, nx=9, ns=3)
