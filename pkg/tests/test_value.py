import numpy as np
import pytest

from conftest import case_a_control, case_a_value, make_brownian_1d, make_quadratic_terminal
from pathgibbs.errors import CapabilityError, PositivityError
from pathgibbs.grids import FieldGrid, TimeGrid
from pathgibbs.sde import ControlField, DiffusionModel, girsanov_log_weights, simulate_controlled
from pathgibbs.value import (
    Hamiltonian,
    control_cost_mc,
    estimate_value_mc,
    hamiltonian_eval,
    hamiltonian_eval_ensemble,
    hjb_residual,
    mc_optimal_control,
    optimal_control,
    solve_value_pde,
)

LN2 = np.log(2.0)
GRID = TimeGrid(0.0, 1.0, 100)
CASE_A_GRID = FieldGrid.uniform([(-6.0, 6.0)], [401], 0.0, 1.0, 400)


def make_path(values):
    from pathgibbs.sde import Path
    states = np.asarray(values, dtype=float)[:, None]
    return Path(TimeGrid(0.0, 1.0, len(states) - 1), states)


# ------------------------------------------------------------ hamiltonian

def test_hamiltonian_zero():
    h = Hamiltonian()
    assert hamiltonian_eval(h, make_path(np.linspace(0, 2, 11))) == 0.0


def test_hamiltonian_constant_running_exact():
    h = Hamiltonian(running=lambda x, t: np.ones(x.shape[0]))
    path = make_path(np.random.default_rng(0).normal(size=51))
    assert hamiltonian_eval(h, path) == pytest.approx(1.0, abs=1e-12)


def test_hamiltonian_terminal_only():
    h = make_quadratic_terminal()
    path = make_path(np.linspace(0.0, 2.0, 21))
    assert hamiltonian_eval(h, path) == pytest.approx(2.0, abs=1e-12)


def test_hamiltonian_from_step_partial_sum():
    h = Hamiltonian(running=lambda x, t: np.full(x.shape[0], 2.0))
    path = make_path(np.zeros(11))
    # from step 5 of 10: remaining running time 0.5
    assert hamiltonian_eval(h, path, from_step=5) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        hamiltonian_eval(h, path, from_step=12)


# ------------------------------------------------------------ MC value

def test_value_mc_zero_cost(brownian_1d):
    est = estimate_value_mc(brownian_1d, Hamiltonian(), 0.0, 0.0, GRID, 100, seed=0)
    assert est.value == 0.0 and est.std_error == 0.0


def test_value_mc_case_a_origin(brownian_1d, quadratic_terminal):
    est = estimate_value_mc(brownian_1d, quadratic_terminal, 0.0, 0.0, GRID,
                            40_000, seed=1)
    assert abs(est.value - 0.5 * LN2) < 3 * est.std_error


def test_value_mc_case_a_shifted_start(brownian_1d, quadratic_terminal):
    est = estimate_value_mc(brownian_1d, quadratic_terminal, 1.0, 0.0, GRID,
                            40_000, seed=2)
    assert abs(est.value - (0.5 * LN2 + 0.25)) < 3 * est.std_error


def test_value_mc_mid_time_start(brownian_1d, quadratic_terminal):
    est = estimate_value_mc(brownian_1d, quadratic_terminal, 0.5, 0.5, GRID,
                            40_000, seed=3)
    assert abs(est.value - case_a_value(0.5, 0.5)) < 3 * est.std_error + 1e-3


def test_value_mc_log_mean_bias_is_small():
    # -log of a sample mean is biased by ~ rel_var / (2 n); check empirically
    model = make_brownian_1d()
    h = make_quadratic_terminal()
    n, reps = 200, 300
    vals = np.array([estimate_value_mc(model, h, 0.0, 0.0, GRID, n, seed=s).value
                     for s in range(reps)])
    rel_var = (np.sqrt(3) / np.sqrt(2) ** 2 - 1)  # Var(w)/E[w]^2 for w = e^{-X^2/2}
    predicted_bias = rel_var / (2 * n)
    observed = vals.mean() - 0.5 * LN2
    assert abs(observed - predicted_bias) < 3 * vals.std(ddof=1) / np.sqrt(reps)


# ------------------------------------------------------------ PDE value

def test_pde_zero_cost_gives_unit_density(brownian_1d):
    grid = FieldGrid.uniform([(-3.0, 3.0)], [61], 0.0, 1.0, 50)
    rho, v = solve_value_pde(brownian_1d, Hamiltonian(), grid)
    np.testing.assert_allclose(rho.values, 1.0, atol=1e-12)
    np.testing.assert_allclose(v.values, 0.0, atol=1e-12)


def test_pde_case_a_matches_closed_form(brownian_1d, quadratic_terminal):
    rho, v = solve_value_pde(brownian_1d, quadratic_terminal, CASE_A_GRID)
    assert np.all(rho.values > 0)
    tt, xx = np.meshgrid(CASE_A_GRID.times, CASE_A_GRID.axes[0], indexing="ij")
    exact = case_a_value(xx, tt)
    err = np.abs(v.values - exact)[:, 1:-1]
    assert err.max() < 5e-3


def test_pde_constant_running_cost(brownian_1d):
    c = 0.8
    h = Hamiltonian(running=lambda x, t: np.full(x.shape[0], c))
    grid = FieldGrid.uniform([(-4.0, 4.0)], [81], 0.0, 1.0, 200)
    _, v = solve_value_pde(brownian_1d, h, grid)
    tt = grid.times[:, None]
    # damped startup steps contribute O(dt^2); the rest is Pade-accurate
    assert np.abs(v.values - c * (1.0 - tt)).max() < 5e-5


def test_pde_frozen_boundary_still_fine_in_bulk(brownian_1d, quadratic_terminal):
    rho, v = solve_value_pde(brownian_1d, quadratic_terminal, CASE_A_GRID,
                             boundary="frozen")
    x = CASE_A_GRID.axes[0]
    window = np.abs(x) <= 4.0
    tt, xx = np.meshgrid(CASE_A_GRID.times, x[window], indexing="ij")
    err = np.abs(v.values[:, window] - case_a_value(xx, tt))
    assert err.max() < 5e-3


def test_pde_requires_elliptic_model(quadratic_terminal):
    model = DiffusionModel(1, 1, lambda x, t: np.zeros_like(x),
                           lambda x, t: np.ones((1, 1)))
    with pytest.raises(CapabilityError):
        solve_value_pde(model, quadratic_terminal, CASE_A_GRID)


def test_pde_2d_separable_quadratic():
    model = DiffusionModel(
        state_dim=2, noise_dim=2,
        drift=lambda x, t: np.zeros_like(x),
        diffusion=lambda x, t: np.eye(2),
        uniformly_elliptic=True, ellipticity_constant=1.0)
    h = Hamiltonian(terminal=lambda x: 0.5 * np.sum(x ** 2, axis=1))
    grid = FieldGrid.uniform([(-6.0, 6.0), (-6.0, 6.0)], [121, 121], 0.0, 1.0, 100)
    _, v = solve_value_pde(model, h, grid)
    tt = grid.times[:, None, None]
    xx, yy = np.meshgrid(grid.axes[0], grid.axes[1], indexing="ij")
    exact = (case_a_value(xx[None], tt) + case_a_value(yy[None], tt))
    x_window = np.abs(grid.axes[0]) <= 3.0
    err = np.abs(v.values - exact)[:, x_window][:, :, x_window]
    assert err.max() < 5e-3


# ------------------------------------------------------------ control field

def test_optimal_control_constant_field():
    grid = FieldGrid.uniform([(-1.0, 1.0)], [21], 0.0, 1.0, 2)
    from pathgibbs.grids import ScalarField
    v = ScalarField(grid, np.full((3, 21), 4.2))
    u = optimal_control(v)
    assert np.all(u(np.array([[0.3]]), 0.5) == 0.0)


def test_optimal_control_case_a_probe(brownian_1d, quadratic_terminal):
    _, v = solve_value_pde(brownian_1d, quadratic_terminal, CASE_A_GRID)
    u = optimal_control(v)
    got = u(np.array([[1.0]]), 0.0)[0, 0]
    assert got == pytest.approx(-0.5, abs=1e-2)
    assert abs(u(np.array([[0.0]]), 0.37)[0, 0]) < 1e-6


# ------------------------------------------------------------ HJB residual

def test_hjb_residual_zero_field(brownian_1d):
    grid = FieldGrid.uniform([(-2.0, 2.0)], [41], 0.0, 1.0, 20)
    from pathgibbs.grids import ScalarField
    v = ScalarField(grid, np.zeros((21, 41)))
    res = hjb_residual(v, brownian_1d, Hamiltonian())
    assert np.abs(res.values).max() == 0.0


def test_hjb_residual_on_injected_exact_solution(brownian_1d, quadratic_terminal):
    tt, xx = np.meshgrid(CASE_A_GRID.times, CASE_A_GRID.axes[0], indexing="ij")
    from pathgibbs.grids import ScalarField
    v = ScalarField(CASE_A_GRID, case_a_value(xx, tt))
    res = hjb_residual(v, brownian_1d, quadratic_terminal)
    assert np.abs(res.values).max() < 1e-2


def test_hjb_residual_shrinks_under_refinement(brownian_1d, quadratic_terminal):
    # fixed probe window: clear of the startup time layer and the wall cells,
    # where the residual is a pure consistency measurement
    maxima = []
    for nodes, steps in [(101, 100), (201, 200)]:
        grid = FieldGrid.uniform([(-6.0, 6.0)], [nodes], 0.0, 1.0, steps)
        _, v = solve_value_pde(brownian_1d, quadratic_terminal, grid)
        res = hjb_residual(v, brownian_1d, quadratic_terminal)
        t, x = res.grid.times, res.grid.axes[0]
        window = np.abs(res.values)[np.ix_(t <= 0.9, np.abs(x) <= 5.0)]
        maxima.append(window.max())
    assert maxima[1] < maxima[0] / 3.0


# ------------------------------------------------------------ control cost

def test_control_cost_zero_everything(brownian_1d):
    est = control_cost_mc(brownian_1d, ControlField.zero(1), Hamiltonian(),
                          0.0, GRID, 50, seed=0)
    assert est.value == 0.0 and est.std_error == 0.0


def test_control_cost_optimal_equals_value(brownian_1d, quadratic_terminal):
    u_star = ControlField(lambda x, t: case_a_control(x, t))
    est = control_cost_mc(brownian_1d, u_star, quadratic_terminal, 0.0,
                          TimeGrid(0.0, 1.0, 200), 40_000, seed=4)
    assert abs(est.value - 0.5 * LN2) < 3 * est.std_error + 2e-3


def test_control_cost_uncontrolled_strictly_worse(brownian_1d, quadratic_terminal):
    est = control_cost_mc(brownian_1d, ControlField.zero(1), quadratic_terminal,
                          0.0, GRID, 40_000, seed=5)
    assert abs(est.value - 0.5) < 3 * est.std_error
    assert est.value - 0.5 * LN2 > 5 * est.std_error


# ------------------------------------------------- MC optimal control

def test_mc_control_zero_cost(brownian_1d):
    est, se = mc_optimal_control(brownian_1d, Hamiltonian(), 0.0, 0.0, GRID,
                                 200, seed=0)
    np.testing.assert_allclose(est, 0.0, atol=1e-12)


def test_mc_control_case_a(brownian_1d, quadratic_terminal):
    est, se = mc_optimal_control(brownian_1d, quadratic_terminal, 1.0, 0.0,
                                 GRID, 40_000, seed=6)
    assert abs(est[0] + 0.5) < 3 * se[0] + 1e-3


def test_mc_control_linear_terminal_is_exact(brownian_1d):
    h = Hamiltonian(terminal=lambda x: x[:, 0],
                    terminal_gradient=lambda x: np.ones_like(x))
    for z, s in [(0.0, 0.0), (1.3, 0.0), (-0.7, 0.5)]:
        est, se = mc_optimal_control(brownian_1d, h, z, s, GRID, 500, seed=7)
        assert est[0] == pytest.approx(-1.0, abs=1e-12)


def test_mc_control_agrees_with_grid_gradient(brownian_1d, quadratic_terminal):
    _, v = solve_value_pde(brownian_1d, quadratic_terminal, CASE_A_GRID)
    u = optimal_control(v)
    hits = 0
    probes = [(-1.5, 0.0), (-0.5, 0.0), (0.5, 0.0), (1.5, 0.0),
              (-1.0, 0.5), (0.0, 0.5), (1.0, 0.5), (2.0, 0.25)]
    for i, (z, s) in enumerate(probes):
        est, se = mc_optimal_control(brownian_1d, quadratic_terminal, z, s,
                                     GRID, 20_000, seed=100 + i)
        grid_val = u(np.array([[z]]), s)[0, 0]
        if abs(est[0] - grid_val) < 3 * se[0] + 1e-2:
            hits += 1
    assert hits >= int(np.ceil(0.95 * len(probes)))


# ------------------------------------------------- pathwise verification

def test_girsanov_value_identity_along_controlled_paths(brownian_1d, quadratic_terminal):
    # along optimally controlled paths, log Z + H is the constant v(z, 0)
    grid = TimeGrid(0.0, 1.0, 400)
    u_star = ControlField(lambda x, t: case_a_control(x, t))
    ens = simulate_controlled(brownian_1d, u_star, grid, init=0.0,
                              n_paths=20_000, seed=8)
    log_z = girsanov_log_weights(ens, brownian_1d, u_star, increments="controlled")
    h_vals = hamiltonian_eval_ensemble(quadratic_terminal, ens)
    total = log_z + h_vals
    se = total.std(ddof=1) / np.sqrt(len(total))
    assert abs(total.mean() - 0.5 * LN2) < 3 * se + 2e-3
    # discretization is the only source of spread
    assert total.std() < 0.1
