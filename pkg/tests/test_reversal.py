import numpy as np
import pytest

from pathgibbs.errors import CapabilityError, PositivityError, SupportError
from pathgibbs.grids import FieldGrid, GaussianLaw, GridMeasure, ScalarField
from pathgibbs.presets import brownian_model, get as get_preset, ou_model
from pathgibbs.reversal import (
    DensityEvolution,
    reversal_free_energy,
    reversal_hamiltonian,
    reversal_value_check,
    reversed_drift,
    simulate_reversal,
    solve_forward_kolmogorov,
)
from pathgibbs.sde import DiffusionModel


def gaussian_density(x, mean, var):
    return np.exp(-(x - mean) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)


def brownian_grid(n_nodes=401, n_steps=400, half_width=8.0):
    nodes = np.linspace(-half_width, half_width, n_nodes)
    return nodes, FieldGrid((nodes,), np.linspace(0.0, 1.0, n_steps + 1))


# ---------------------------------------------------------- forward solver

def test_heat_spread_matches_convolution():
    nodes, fg = brownian_grid()
    p0 = gaussian_density(nodes, 0.0, 1.0)
    evo = solve_forward_kolmogorov(brownian_model(), p0, fg)
    expected = gaussian_density(nodes, 0.0, 2.0)
    assert np.abs(evo.terminal_density() - expected).max() < 1e-3
    assert np.abs(evo.mass_history - 1.0).max() < 1e-10


def test_pure_transport_translates_density():
    model = DiffusionModel(1, 1, lambda x, t: np.ones_like(x),
                           lambda x, t: np.zeros((1, 1)))
    nodes, fg = brownian_grid(n_nodes=801, n_steps=800)
    p0 = gaussian_density(nodes, -1.0, 0.25)
    evo = solve_forward_kolmogorov(model, p0, fg)
    expected = gaussian_density(nodes, 0.0, 0.25)
    assert np.abs(evo.mass_history - 1.0).max() < 1e-10
    assert np.abs(evo.terminal_density() - expected).max() < 5e-3
    mean = np.sum(evo.terminal_density() * nodes) * (nodes[1] - nodes[0])
    assert mean == pytest.approx(0.0, abs=1e-3)


def test_ou_stationary_density_is_fixed():
    nodes = np.linspace(-6.0, 6.0, 401)
    fg = FieldGrid((nodes,), np.linspace(0.0, 1.0, 201))
    model = ou_model()  # rate 1, noise 1: stationary variance 1/2
    p0 = gaussian_density(nodes, 0.0, 0.5)
    evo = solve_forward_kolmogorov(model, p0, fg)
    assert np.abs(evo.field.values - p0[None, :]).max() < 1e-4


def test_forward_solver_input_validation():
    nodes, fg = brownian_grid(101, 50)
    with pytest.raises(PositivityError):
        solve_forward_kolmogorov(brownian_model(), -np.ones(101), fg)
    with pytest.raises(ValueError):
        solve_forward_kolmogorov(brownian_model(), np.ones(101), fg)


def test_heat_spread_2d_diagonal():
    nodes = np.linspace(-6.0, 6.0, 101)
    fg = FieldGrid((nodes, nodes), np.linspace(0.0, 1.0, 101))
    model = DiffusionModel(
        2, 2, lambda x, t: np.zeros_like(x), lambda x, t: np.eye(2),
        uniformly_elliptic=True, ellipticity_constant=1.0)
    p0 = np.outer(gaussian_density(nodes, 0.0, 1.0), gaussian_density(nodes, 0.0, 1.0))
    evo = solve_forward_kolmogorov(model, p0, fg)
    h = nodes[1] - nodes[0]
    var_x = float((evo.terminal_density().sum(axis=1) * h ** 2) @ (nodes ** 2))
    assert var_x == pytest.approx(2.0, abs=5e-3)
    assert np.abs(evo.mass_history - 1.0).max() < 1e-10


def test_2d_cross_diffusion_rejected():
    nodes = np.linspace(-2.0, 2.0, 21)
    fg = FieldGrid((nodes, nodes), np.linspace(0.0, 1.0, 11))
    sig = np.array([[1.0, 0.5], [0.0, 1.0]])
    model = DiffusionModel(2, 2, lambda x, t: np.zeros_like(x),
                           lambda x, t: sig)
    p0 = np.outer(gaussian_density(nodes, 0, 0.25), gaussian_density(nodes, 0, 0.25))
    p0 = p0 / (p0.sum() * (nodes[1] - nodes[0]) ** 2)
    with pytest.raises(CapabilityError):
        solve_forward_kolmogorov(model, p0, fg)


# ---------------------------------------------------------- reversed drift

def test_reversed_brownian_drift_is_density_score():
    nodes, fg = brownian_grid()
    p0 = gaussian_density(nodes, 0.0, 1.0)
    evo = solve_forward_kolmogorov(brownian_model(), p0, fg)
    rev = reversed_drift(evo, brownian_model())
    got = rev.reversed_drift_at(np.array([[1.0]]), 0.0)[0, 0]
    assert got == pytest.approx(-0.5, abs=1e-2)
    # across the bulk and at a later reversal time
    probe = np.linspace(-3, 3, 25)[:, None]
    got = rev.reversed_drift_at(probe, 0.5)[:, 0]
    assert np.abs(got + probe[:, 0] / 1.5).max() < 1e-2


def test_reversed_stationary_ou_keeps_drift():
    # score error of the discrete stationary state grows like h^2 x^3 in the
    # tail; the fine grid keeps the 3-sigma window within tolerance
    nodes = np.linspace(-6.0, 6.0, 801)
    fg = FieldGrid((nodes,), np.linspace(0.0, 1.0, 301))
    model = ou_model()
    p0 = gaussian_density(nodes, 0.0, 0.5)
    evo = solve_forward_kolmogorov(model, p0, fg)
    rev = reversed_drift(evo, model)
    probe = np.linspace(-3.0, 3.0, 25)[:, None]
    for t in (0.0, 0.5, 1.0):
        got = rev.reversed_drift_at(probe, t)[:, 0]
        assert np.abs(got + probe[:, 0]).max() < 1e-2


def test_reversed_drift_decomposition_identity():
    nodes, fg = brownian_grid(201, 200)
    p0 = gaussian_density(nodes, 0.0, 1.0)
    model = brownian_model()
    evo = solve_forward_kolmogorov(model, p0, fg)
    rev = reversed_drift(evo, model)
    # a == 1 for the Brownian model: drift must equal b_hat + score exactly
    recombined = rev.b_hat_fields[0].values + rev.score_fields[0].values
    mask = rev.p_bar.values >= 10 * rev.floor
    assert np.abs((rev.drift_fields[0].values - recombined)[mask]).max() < 1e-12


def test_reversed_drift_floor_convention():
    # inject a density with exact zeros in the far field: the score term must
    # vanish there, leaving the sign-flipped drift alone
    nodes = np.linspace(-4.0, 4.0, 81)
    fg = FieldGrid((nodes,), np.linspace(0.0, 1.0, 11))
    core = gaussian_density(nodes, 0.0, 0.25)
    core[np.abs(nodes) > 2.0] = 0.0
    h = nodes[1] - nodes[0]
    core = core / (core.sum() * h)
    values = np.tile(core, (11, 1))
    evo = DensityEvolution(field=ScalarField(fg, values), initial=core,
                           mass_history=np.ones(11))
    model = ou_model()
    rev = reversed_drift(evo, model)
    far = np.abs(nodes) > 2.5
    got = rev.drift_fields[0].values[0][far]
    b_hat = rev.b_hat_fields[0].values[0][far]
    np.testing.assert_array_equal(got, b_hat)
    np.testing.assert_allclose(b_hat, nodes[far], atol=1e-10)


# ----------------------------------------------------- reversal hamiltonian

def test_reversal_hamiltonian_brownian():
    model = brownian_model(initial_law=GaussianLaw(np.zeros(1), np.eye(1)))
    h = reversal_hamiltonian(model, 1.0)
    x = np.linspace(-3, 3, 7)[:, None]
    assert np.abs(h.f(x, 0.3)).max() < 1e-8
    expected_g = x[:, 0] ** 2 / 2 + 0.5 * np.log(2 * np.pi)
    np.testing.assert_allclose(h.g(x), expected_g, atol=1e-12)


def test_reversal_hamiltonian_ou_unit_divergence():
    model = ou_model(initial_law=GaussianLaw(np.zeros(1), 0.5 * np.eye(1)))
    h = reversal_hamiltonian(model, 1.0)
    x = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_allclose(h.f(x, 0.2), 1.0, atol=1e-6)


def test_reversal_hamiltonian_linear_drift_trace():
    mat = np.array([[0.5, 0.2], [0.0, 0.3]])
    model = DiffusionModel(
        2, 2, lambda x, t: x @ mat.T, lambda x, t: np.eye(2),
        initial_law=GaussianLaw(np.zeros(2), np.eye(2)),
        uniformly_elliptic=True, ellipticity_constant=1.0)
    h = reversal_hamiltonian(model, 1.0)
    x = np.array([[0.3, -0.4], [1.0, 2.0]])
    np.testing.assert_allclose(h.f(x, 0.1), -np.trace(mat), atol=1e-6)


def test_reversal_hamiltonian_support_error():
    nodes = np.linspace(-1, 1, 11)
    dens = np.ones(11)
    dens[0] = 0.0
    law = GridMeasure.from_density(nodes, dens, normalize=True)
    model = brownian_model(initial_law=law)
    with pytest.raises(SupportError):
        reversal_hamiltonian(model, 1.0)


# ------------------------------------------------------------ value check

def test_reversal_value_check_brownian():
    preset = get_preset("brownian_reversal").build()
    report = reversal_value_check(
        preset["model"], preset["p0"], preset["field_grid"],
        probe_bounds=[(-5.0, 5.0)],
        mc_probes=((0.0, 0.0),), mc_samples=20_000, seed=3)
    assert report.max_discrepancy < 1e-2
    (z, s, est, se, target) = report.mc_probes[0]
    assert target == pytest.approx(0.5 * np.log(4 * np.pi), abs=1e-3)
    assert abs(est - target) < 3 * se + 2e-3
    # terminal slice reproduces the terminal cost exactly
    x = preset["field_grid"].axes[0]
    window = np.abs(x) <= 5.0
    g_exact = x[window] ** 2 / 2 + 0.5 * np.log(2 * np.pi)
    assert np.abs(report.value_field.values[-1][window] - g_exact).max() < 1e-12


# ------------------------------------------------------------- simulation

def test_simulate_reversal_brownian_marginals():
    preset = get_preset("brownian_reversal").build()
    report = simulate_reversal(preset["model"], preset["p0"],
                               preset["field_grid"], n_paths=50_000, seed=11,
                               probes=preset["probes"])
    assert report.all_pass
    mid = next(r for r in report.rows if r.probe_t == 0.5)
    n = 50_000
    assert abs(mid.reversed_var - 1.5) < 3 * 1.5 * np.sqrt(2.0 / n) + 5e-3
    assert abs(mid.reversed_mean) < 3 * np.sqrt(1.5 / n) + 5e-3


def test_simulate_reversal_stationary_ou():
    preset = get_preset("ou_reversal").build()
    report = simulate_reversal(preset["model"], preset["p0"],
                               preset["field_grid"], n_paths=30_000, seed=12,
                               probes=preset["probes"])
    assert report.all_pass
    for row in report.rows:
        assert row.reversed_var == pytest.approx(0.5, abs=0.02)


def test_simulate_reversal_needs_noise():
    nodes = np.linspace(-2, 2, 41)
    fg = FieldGrid((nodes,), np.linspace(0.0, 1.0, 11))
    model = DiffusionModel(1, 1, lambda x, t: np.ones_like(x),
                           lambda x, t: np.zeros((1, 1)))
    with pytest.raises(CapabilityError):
        simulate_reversal(model, gaussian_density(nodes, 0, 0.25), fg, 10, 0)


# ------------------------------------------------------------ free energy

def test_entropy_of_injected_gaussians():
    nodes, fg = brownian_grid()
    for var, expected in [(2.0, 0.5 * np.log(4 * np.pi * np.e)),
                          (1.0, 0.5 * np.log(2 * np.pi * np.e))]:
        values = np.tile(gaussian_density(nodes, 0.0, var), (len(fg.times), 1))
        evo = DensityEvolution(field=ScalarField(fg, values),
                               initial=values[0], mass_history=np.ones(len(fg.times)))
        assert reversal_free_energy(evo) == pytest.approx(expected, abs=1e-4)


def test_entropy_of_uniform_density_is_zero():
    nodes = np.linspace(0.0, 1.0, 101)
    fg = FieldGrid((nodes,), np.linspace(0.0, 1.0, 3))
    values = np.ones((3, 101))
    evo = DensityEvolution(field=ScalarField(fg, values), initial=values[0],
                           mass_history=np.ones(3))
    assert reversal_free_energy(evo) == pytest.approx(0.0, abs=1e-12)


def test_entropy_identity_against_value_route():
    # the tilted-path free energy of the reversed mixture equals the terminal
    # differential entropy: integrate v(., 0) from the value route against
    # the solved terminal density
    preset = get_preset("brownian_reversal").build()
    fg = preset["field_grid"]
    evo = solve_forward_kolmogorov(preset["model"], preset["p0"], fg)
    report = reversal_value_check(preset["model"], preset["p0"], fg,
                                  probe_bounds=[(-5.0, 5.0)])
    from pathgibbs.grids import trapezoid_weights
    w = trapezoid_weights(fg.axes[0])
    p_T = evo.terminal_density()
    mixture_free_energy = float(np.sum(p_T * report.value_field.values[0] * w))
    assert mixture_free_energy == pytest.approx(reversal_free_energy(evo), abs=1e-3)
