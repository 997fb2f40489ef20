"""Named oracle presets: models, costs, targets, and their known answers.

Each preset bundles the ingredients of one worked case whose exact answer is
known in closed form, so estimators and solvers can be cross-validated.  The
``oracle`` dictionaries record those reference values.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass, field
from typing import Callable

from .grids import FieldGrid, GaussianLaw, GridMeasure, TimeGrid
from .sde import DiffusionModel
from .value import Hamiltonian

LN2 = float(np.log(2.0))


def brownian_model(initial_law=None) -> DiffusionModel:
    """Standard 1-d Brownian motion (unit diffusion, zero drift)."""

    def transition(z, y, s, t):
        z = np.asarray(z, dtype=float)[:, None]
        y = np.asarray(y, dtype=float)[None, :]
        var = t - s
        return np.exp(-(y - z) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)

    return DiffusionModel(
        state_dim=1, noise_dim=1,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.ones((1, 1)),
        drift_jacobian=lambda x, t: np.zeros((x.shape[0], 1, 1)),
        diffusion_jacobian=lambda x, t: np.zeros((x.shape[0], 1, 1, 1)),
        initial_law=initial_law,
        uniformly_elliptic=True, ellipticity_constant=1.0,
        closed_form_transition=transition,
        name="brownian_1d")


def ou_model(rate: float = 1.0, noise_scale: float = 1.0, initial_law=None) -> DiffusionModel:
    """1-d mean-reverting linear diffusion dX = -rate X dt + noise_scale dW."""

    def transition(z, y, s, t):
        z = np.asarray(z, dtype=float)[:, None]
        y = np.asarray(y, dtype=float)[None, :]
        tau = t - s
        mean = z * np.exp(-rate * tau)
        var = noise_scale ** 2 * (1.0 - np.exp(-2 * rate * tau)) / (2 * rate)
        return np.exp(-(y - mean) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)

    return DiffusionModel(
        state_dim=1, noise_dim=1,
        drift=lambda x, t: -rate * x,
        diffusion=lambda x, t: np.full((1, 1), noise_scale),
        drift_jacobian=lambda x, t: np.full((x.shape[0], 1, 1), -rate),
        diffusion_jacobian=lambda x, t: np.zeros((x.shape[0], 1, 1, 1)),
        initial_law=initial_law,
        uniformly_elliptic=True, ellipticity_constant=noise_scale ** 2,
        closed_form_transition=transition,
        name=f"ou_1d(rate={rate})")


def quadratic_hamiltonian() -> Hamiltonian:
    return Hamiltonian(terminal=lambda x: 0.5 * x[:, 0] ** 2,
                       terminal_gradient=lambda x: x,
                       name="half_square_terminal")


def linear_hamiltonian() -> Hamiltonian:
    return Hamiltonian(terminal=lambda x: x[:, 0],
                       terminal_gradient=lambda x: np.ones_like(x),
                       name="linear_terminal")


def quadratic_running_hamiltonian() -> Hamiltonian:
    return Hamiltonian(running=lambda x, t: x[:, 0] ** 2,
                       running_gradient=lambda x, t: 2.0 * x,
                       name="quadratic_running")


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    kinds: tuple[str, ...]
    build: Callable[[], dict]
    oracle: dict = field(default_factory=dict)


def _case_a_build() -> dict:
    return {
        "model": brownian_model(),
        "hamiltonian": quadratic_hamiltonian(),
        "z": np.array([0.0]),
        "time_grid": TimeGrid(0.0, 1.0, 200),
        "field_grid": FieldGrid.uniform([(-6.0, 6.0)], [401], 0.0, 1.0, 400),
    }


def _brownian_build() -> dict:
    return {
        "model": brownian_model(),
        "z": np.array([0.0]),
        "time_grid": TimeGrid(0.0, 1.0, 100),
    }


def _linear_terminal_build() -> dict:
    d = _case_a_build()
    d["hamiltonian"] = linear_hamiltonian()
    return d


def _quadratic_killing_build() -> dict:
    return {
        "model": brownian_model(),
        "hamiltonian": quadratic_running_hamiltonian(),
        "z": np.array([0.0]),
        "time_grid": TimeGrid(0.0, 1.0, 200),
    }


def _bridge_nodes():
    return np.linspace(-8.0, 8.0, 321)


def _gaussian_bridge_build() -> dict:
    nodes = _bridge_nodes()
    return {
        "model": brownian_model(),
        "t_end": 1.0,
        "nodes": nodes,
        "mu": GridMeasure.gaussian(nodes, 0.0, 0.25),
        "mu_prime": GridMeasure.gaussian(nodes, 1.0, 0.25),
        "field_grid": FieldGrid((nodes,), np.linspace(0.0, 1.0, 401)),
        "time_grid": TimeGrid(0.0, 1.0, 400),
    }


def _two_state_bridge_build() -> dict:
    nodes = np.array([0.0, 1.0])
    ones = np.ones(2)
    return {
        "t_end": 1.0,
        "nodes": nodes,
        "kernel_density": np.full((2, 2), 0.5),
        "weights": ones,
        "mu": GridMeasure(nodes, np.array([0.5, 0.5]), ones),
        "mu_prime": GridMeasure(nodes, np.array([0.3, 0.7]), ones),
    }


def _follmer_build(mean, var) -> Callable[[], dict]:
    def build():
        nodes = _bridge_nodes()
        return {
            "model": brownian_model(),
            "t_end": 1.0,
            "nodes": nodes,
            "mu": GridMeasure.dirac(0.0),
            "mu_prime": GridMeasure.gaussian(nodes, mean, var),
            "field_grid": FieldGrid((nodes,), np.linspace(0.0, 1.0, 401)),
            "time_grid": TimeGrid(0.0, 1.0, 400),
        }
    return build


def _brownian_reversal_build() -> dict:
    nodes = np.linspace(-8.0, 8.0, 401)
    return {
        "model": brownian_model(initial_law=GaussianLaw(np.zeros(1), np.eye(1))),
        "t_end": 1.0,
        "p0": np.exp(-nodes ** 2 / 2) / np.sqrt(2 * np.pi),
        "field_grid": FieldGrid((nodes,), np.linspace(0.0, 1.0, 401)),
        "probes": (0.0, 0.25, 0.5, 0.75, 1.0),
    }


def _ou_reversal_build() -> dict:
    nodes = np.linspace(-6.0, 6.0, 401)
    return {
        "model": ou_model(initial_law=GaussianLaw(np.zeros(1), 0.5 * np.eye(1))),
        "t_end": 1.0,
        "p0": np.exp(-nodes ** 2) / np.sqrt(np.pi),
        "field_grid": FieldGrid((nodes,), np.linspace(0.0, 1.0, 401)),
        "probes": (0.0, 0.25, 0.5, 0.75, 1.0),
    }


_GAUSS_KL_SHIFT = 0.5          # D(N(1,1) || N(0,1))
_GAUSS_KL_NARROW = 0.5 * (LN2 - 0.5)   # D(N(0,1/2) || N(0,1))

_PRESETS = (
    Preset(
        name="brownian_1d",
        description="standard Brownian motion; smoke preset for the simulator",
        kinds=("simulate",),
        build=_brownian_build),
    Preset(
        name="case_a_quadratic",
        description="Brownian reference tilted by a half-square terminal cost; "
                    "fully solvable value problem",
        kinds=("simulate", "value", "fk"),
        build=_case_a_build,
        oracle={"value_at_origin": 0.5 * LN2,
                "control_at_z1_t0": -0.5,
                "tilted_second_moment": 0.5,
                "uncontrolled_cost": 0.5}),
    Preset(
        name="linear_terminal",
        description="Brownian reference with a linear terminal cost; constant "
                    "optimal drift",
        kinds=("simulate", "value"),
        build=_linear_terminal_build,
        oracle={"control_everywhere": -1.0}),
    Preset(
        name="quadratic_killing",
        description="nonnegative quadratic running cost with no terminal cost; "
                    "exercises the killing estimator",
        kinds=("fk",),
        build=_quadratic_killing_build,
        oracle={}),
    Preset(
        name="gaussian_bridge",
        description="narrow Gaussian to shifted narrow Gaussian through a "
                    "Brownian kernel over unit time",
        kinds=("bridge",),
        build=_gaussian_bridge_build,
        oracle={"coupling_mean_source": 0.0,
                "coupling_mean_target": 1.0,
                "coupling_covariance": (np.sqrt(5.0) - 2.0) / 4.0}),
    Preset(
        name="two_state_bridge",
        description="two-point space with a uniform kernel; the coupling "
                    "factorizes exactly",
        kinds=("bridge",),
        build=_two_state_bridge_build,
        oracle={"coupling_is_product": True}),
    Preset(
        name="follmer_gaussian",
        description="point start steered into a unit Gaussian centered at 1",
        kinds=("bridge",),
        build=_follmer_build(1.0, 1.0),
        oracle={"minimum_energy": _GAUSS_KL_SHIFT,
                "constant_drift": 1.0}),
    Preset(
        name="follmer_halfvar",
        description="point start steered into a centered Gaussian of variance 1/2",
        kinds=("bridge",),
        build=_follmer_build(0.0, 0.5),
        oracle={"minimum_energy": _GAUSS_KL_NARROW,
                "drift_slope_at_t0": -0.5}),
    Preset(
        name="brownian_reversal",
        description="Brownian motion from a standard Gaussian start, reversed "
                    "over unit time",
        kinds=("reverse",),
        build=_brownian_reversal_build,
        oracle={"reversed_drift_at_x1_t0": -0.5,
                "terminal_entropy": 0.5 * np.log(4 * np.pi * np.e),
                "neg_log_density_origin": 0.5 * np.log(4 * np.pi)}),
    Preset(
        name="ou_reversal",
        description="stationary mean-reverting diffusion; reversal leaves the "
                    "drift unchanged",
        kinds=("reverse",),
        build=_ou_reversal_build,
        oracle={"stationary_variance": 0.5}),
    Preset(
        name="ou_1d",
        description="mean-reverting linear diffusion with closed-form transitions",
        kinds=("simulate", "bridge"),
        build=lambda: {"model": ou_model(),
                       "time_grid": TimeGrid(0.0, 1.0, 100),
                       "z": np.array([1.0])},
        oracle={"transition_mean_factor": float(np.exp(-1.0)),
                "transition_variance": (1.0 - np.exp(-2.0)) / 2.0}),
)


def catalog() -> dict[str, Preset]:
    return {p.name: p for p in _PRESETS}


def get(name: str) -> Preset:
    try:
        return catalog()[name]
    except KeyError:
        raise KeyError(f"unknown preset: {name!r}; known: {sorted(catalog())}")
