"""Shared model and cost builders for the oracle test cases."""

import numpy as np
import pytest

from pathgibbs.sde import DiffusionModel
from pathgibbs.value import Hamiltonian


def make_brownian_1d(**kw):
    return DiffusionModel(
        state_dim=1, noise_dim=1,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.ones((1, 1)),
        drift_jacobian=lambda x, t: np.zeros((x.shape[0], 1, 1)),
        diffusion_jacobian=lambda x, t: np.zeros((x.shape[0], 1, 1, 1)),
        uniformly_elliptic=True, ellipticity_constant=1.0,
        name="brownian_1d", **kw)


def make_quadratic_terminal():
    """Half-square terminal cost: tilts a unit-time Brownian into N(0, 1/2)."""
    return Hamiltonian(
        terminal=lambda x: 0.5 * x[:, 0] ** 2,
        terminal_gradient=lambda x: x,
        name="quadratic_terminal")


def case_a_value(z, t, horizon=1.0):
    """Closed-form value for the Brownian + half-square-terminal case."""
    tau = 1.0 + horizon - t
    return 0.5 * np.log(tau) + np.asarray(z) ** 2 / (2.0 * tau)


def case_a_control(z, t, horizon=1.0):
    return -np.asarray(z) / (1.0 + horizon - t)


@pytest.fixture
def brownian_1d():
    return make_brownian_1d()


@pytest.fixture
def quadratic_terminal():
    return make_quadratic_terminal()
