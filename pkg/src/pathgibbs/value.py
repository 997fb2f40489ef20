"""Value function, optimal control, control cost, and the HJB residual.

The path tilt is specified by a running cost f and a terminal cost g through

    H(path) = int_s^T f(X_t, t) dt + g(X_T),

and the value function is v(z, s) = -log E exp(-H) over reference paths
started at (z, s).  Two independent routes compute it:

* Monte Carlo: a max-shifted log-mean-exp over simulated reference paths,
* PDE: the linear transport-diffusion-decay equation for rho = exp(-v),
  solved backward on a grid and transformed elementwise (Cole-Hopf).

The optimal feedback drift is a(x,t) u*(x,t) with u* = -grad v, available
either as a grid gradient of the solved field or as the flow-derivative
Monte Carlo ratio estimator.  The HJB residual gives an a-posteriori
consistency check of any value field.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from typing import Callable, Optional

from scipy.linalg import solve_banded
from scipy.sparse import csc_matrix, eye as sparse_eye, lil_matrix
from scipy.sparse.linalg import splu

from . import rng
from .errors import CapabilityError, PositivityError, UnreliableEstimateError
from .grids import FieldGrid, ScalarField, TimeGrid
from .sde import (
    ControlField,
    DiffusionModel,
    Path,
    PathEnsemble,
    simulate_controlled,
    simulate_reference,
    _simulate_with_jacobian,
)


@dataclass(frozen=True)
class Hamiltonian:
    """Running cost f(x, t) and terminal cost g(x), batched like coefficients.

    Gradients (when supplied) map states (batch, n) to (batch, n) arrays and
    enable the Monte Carlo representation of the optimal control.
    """

    running: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    terminal: Optional[Callable[[np.ndarray], np.ndarray]] = None
    running_gradient: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    terminal_gradient: Optional[Callable[[np.ndarray], np.ndarray]] = None
    name: str = ""

    def f(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.running is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.running(x, t), dtype=float).reshape(x.shape[0])

    def g(self, x: np.ndarray) -> np.ndarray:
        if self.terminal is None:
            return np.zeros(x.shape[0])
        return np.asarray(self.terminal(x), dtype=float).reshape(x.shape[0])

    def f_x(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.running_gradient is None:
            if self.running is None:
                return np.zeros_like(x)
            raise CapabilityError("Hamiltonian provides no running-cost gradient")
        return np.asarray(self.running_gradient(x, t), dtype=float).reshape(x.shape)

    def g_x(self, x: np.ndarray) -> np.ndarray:
        if self.terminal_gradient is None:
            if self.terminal is None:
                return np.zeros_like(x)
            raise CapabilityError("Hamiltonian provides no terminal-cost gradient")
        return np.asarray(self.terminal_gradient(x), dtype=float).reshape(x.shape)


@dataclass(frozen=True)
class ValueEstimate:
    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.std_error < 0:
            raise ValueError("std_error must be nonnegative")


def hamiltonian_eval_ensemble(h: Hamiltonian, ensemble: PathEnsemble,
                              from_step: int = 0) -> np.ndarray:
    """Left-Riemann H over every path of the ensemble, starting at from_step."""
    grid = ensemble.grid
    if not 0 <= from_step <= grid.n_steps:
        raise ValueError("from_step outside the time grid")
    times = grid.times()
    out = h.g(ensemble.terminal).copy()
    if h.running is not None:
        dt = grid.dt
        for k in range(from_step, grid.n_steps):
            out += h.f(ensemble.states[:, k, :], float(times[k])) * dt
    return out


def hamiltonian_eval(h: Hamiltonian, path: Path, from_step: int = 0) -> float:
    ens = PathEnsemble(path.grid, path.states[None], None)
    return float(hamiltonian_eval_ensemble(h, ens, from_step)[0])


def _log_mean_exp_neg(h_values: np.ndarray) -> tuple[float, float]:
    """(log mean exp(-H), relative std error of the mean), max-shifted."""
    finite = np.isfinite(h_values)
    if not np.any(finite):
        raise UnreliableEstimateError("every path has infinite energy")
    shift = float(np.min(h_values[finite]))
    w = np.exp(-(h_values - shift))
    mean = float(w.mean())
    if mean <= 0.0 or not np.isfinite(mean):
        raise UnreliableEstimateError(
            "mean of exp(-H) underflowed; increase n_samples or use control variates")
    rel_se = float(w.std(ddof=1) / (mean * np.sqrt(len(w)))) if len(w) > 1 else 0.0
    return np.log(mean) - shift, rel_se


def estimate_value_mc(model: DiffusionModel, h: Hamiltonian, z, s: float,
                      grid: TimeGrid, n_samples: int, seed: int) -> ValueEstimate:
    """v(z, s) = -log E exp(-H) by plain Monte Carlo over reference paths.

    The reported delta-method std error ignores the O(1/n) bias of -log of
    a sample mean; at the suite's sample sizes the bias is far below the
    noise and is checked empirically in the tests.
    """
    if not s < grid.t_end:
        raise ValueError("start time must precede the terminal time")
    sub = grid.restrict(s)
    ens = simulate_reference(model, sub, init=z, n_paths=n_samples, seed=seed)
    h_vals = hamiltonian_eval_ensemble(h, ens)
    log_mean, rel_se = _log_mean_exp_neg(h_vals)
    return ValueEstimate(value=-log_mean, std_error=rel_se, n_samples=n_samples)


# ----------------------------------------------------------------- PDE route

def _coefficients_1d(model: DiffusionModel, h: Hamiltonian, x: np.ndarray, t: float):
    pts = x[:, None]
    b = np.asarray(model.drift(pts, t), dtype=float)[:, 0]
    a = model.a(pts, t)[:, 0, 0]
    f = h.f(pts, t)
    return b, a, f


def _tridiag_operator(b, a, f, hx):
    """Rows of M = b d/dx + (a/2) d2/dx2 - f on interior nodes."""
    sub = -b / (2 * hx) + a / (2 * hx * hx)
    main = -a / (hx * hx) - f
    sup = b / (2 * hx) + a / (2 * hx * hx)
    return sub, main, sup


def _frozen_boundary_values(h: Hamiltonian, x_b: float, times: np.ndarray) -> np.ndarray:
    """Terminal datum at a boundary node propagated by d rho / dt = f rho."""
    vals = np.empty(len(times))
    g_b = float(h.g(np.array([[x_b]]))[0])
    vals[-1] = np.exp(-g_b)
    acc = 0.0
    for k in range(len(times) - 2, -1, -1):
        dt = times[k + 1] - times[k]
        f_mid = 0.5 * (float(h.f(np.array([[x_b]]), float(times[k]))[0])
                       + float(h.f(np.array([[x_b]]), float(times[k + 1]))[0]))
        acc += f_mid * dt
        vals[k] = np.exp(-g_b - acc)
    return vals


def _boundary_ratios(rho: np.ndarray) -> tuple[float, float]:
    """Log-quadratic extrapolation ratios rho_edge / rho_neighbor.

    Extrapolating -log rho quadratically through the three interior nodes
    nearest each wall is exact for Gaussian-type tails and keeps the wall
    from starving the interior of mass.
    """
    c_lo = rho[1] ** 2 * rho[3] / rho[2] ** 3
    c_hi = rho[-2] ** 2 * rho[-4] / rho[-3] ** 3
    return float(c_lo), float(c_hi)


def _solve_pde_1d(model, h, field_grid, boundary, theta, rannacher_steps):
    x = field_grid.axes[0]
    (hx,) = field_grid.spacings()
    times = field_grid.times
    nx, nt = len(x), len(times) - 1
    if boundary == "extrapolate" and nx < 5:
        boundary = "frozen"

    values = np.empty((nt + 1, nx))
    rho = np.exp(-h.g(x[:, None]))
    if not np.all(np.isfinite(rho)):
        raise ValueError("terminal condition exp(-g) must be finite on the grid")
    values[nt] = rho

    if boundary == "frozen":
        lo_vals = _frozen_boundary_values(h, float(x[0]), times)
        hi_vals = _frozen_boundary_values(h, float(x[-1]), times)

    coeff_next = _coefficients_1d(model, h, x, float(times[nt]))
    for k in range(nt - 1, -1, -1):
        dt = float(times[k + 1] - times[k])
        th = 1.0 if (nt - 1 - k) < rannacher_steps else theta
        coeff_here = _coefficients_1d(model, h, x, float(times[k]))
        sub_h, main_h, sup_h = _tridiag_operator(*coeff_here, hx)

        rhs = rho.copy()
        if th < 1.0:
            sub_n, main_n, sup_n = _tridiag_operator(*coeff_next, hx)
            m_rho = np.zeros(nx)
            m_rho[1:-1] = (sub_n[1:-1] * rho[:-2] + main_n[1:-1] * rho[1:-1]
                           + sup_n[1:-1] * rho[2:])
            rhs = rho + (1 - th) * dt * m_rho

        ab = np.zeros((3, nx))
        ab[1, 1:-1] = 1.0 - th * dt * main_h[1:-1]
        ab[0, 2:] = -th * dt * sup_h[1:-1]
        ab[2, :-2] = -th * dt * sub_h[1:-1]

        def apply_bc(reference_rho):
            if boundary == "frozen":
                ab[1, 0] = 1.0
                ab[0, 1] = 0.0
                ab[1, -1] = 1.0
                ab[2, -2] = 0.0
                rhs[0] = lo_vals[k]
                rhs[-1] = hi_vals[k]
            else:
                c_lo, c_hi = _boundary_ratios(reference_rho)
                ab[1, 0] = 1.0
                ab[0, 1] = -c_lo
                ab[1, -1] = 1.0
                ab[2, -2] = -c_hi
                rhs[0] = 0.0
                rhs[-1] = 0.0

        apply_bc(rho)
        new = solve_banded((1, 1), ab, rhs)
        if boundary == "extrapolate":
            for _ in range(2):
                if np.any(new <= 0):
                    break
                apply_bc(new)
                new = solve_banded((1, 1), ab, rhs)
        bad = np.nonzero(~(new > 0))[0]
        if bad.size:
            raise PositivityError(
                f"nonpositive density at node x={x[bad[0]]:.6g}, t={times[k]:.6g}")
        rho = new
        values[k] = rho
        coeff_next = coeff_here

    return values


def _solve_pde_2d(model, h, field_grid, theta, rannacher_steps):
    ax, ay = field_grid.axes
    hx, hy = field_grid.spacings()
    times = field_grid.times
    nx, ny = len(ax), len(ay)
    nt = len(times) - 1
    pts = field_grid.points()
    xx = pts[:, 0].reshape(nx, ny)

    edge = np.zeros((nx, ny), dtype=bool)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    edge_flat = edge.ravel()

    g_vals = h.g(pts).reshape(nx, ny)
    rho = np.exp(-g_vals)
    values = np.empty((nt + 1, nx, ny))
    values[nt] = rho

    # boundary datum propagated by d rho/dt = f rho at each edge node
    f_accum = np.zeros(edge_flat.sum())
    edge_pts = pts[edge_flat]
    edge_terminal = rho.ravel()[edge_flat]

    def operator(t):
        b = np.asarray(model.drift(pts, t), dtype=float)
        a = model.a(pts, t)
        f = h.f(pts, t)
        n = nx * ny
        m = lil_matrix((n, n))
        idx = np.arange(n).reshape(nx, ny)
        core = np.zeros((nx, ny), dtype=bool)
        core[1:-1, 1:-1] = True
        ii = idx[core].ravel()
        a11 = a[:, 0, 0][ii]
        a22 = a[:, 1, 1][ii]
        b1 = b[:, 0][ii]
        b2 = b[:, 1][ii]
        m[ii, ii] = -a11 / hx ** 2 - a22 / hy ** 2 - f[ii]
        m[ii, ii - ny] = -b1 / (2 * hx) + a11 / (2 * hx ** 2)
        m[ii, ii + ny] = b1 / (2 * hx) + a11 / (2 * hx ** 2)
        m[ii, ii - 1] = -b2 / (2 * hy) + a22 / (2 * hy ** 2)
        m[ii, ii + 1] = b2 / (2 * hy) + a22 / (2 * hy ** 2)
        a12 = a[:, 0, 1]
        return csc_matrix(m), a12

    def cross_term(rho_flat, a12):
        # explicit centered cross-derivative a12 d2/dxdy, zero near edges
        r = rho_flat.reshape(nx, ny)
        out = np.zeros((nx, ny))
        out[1:-1, 1:-1] = (r[2:, 2:] - r[2:, :-2] - r[:-2, 2:] + r[:-2, :-2]) / (4 * hx * hy)
        return (a12 * out.ravel())

    m_next, a12_next = operator(float(times[nt]))
    ident = sparse_eye(nx * ny, format="csc")
    cached = None  # (theta, operator data, LU factorization)
    for k in range(nt - 1, -1, -1):
        dt = float(times[k + 1] - times[k])
        th = 1.0 if (nt - 1 - k) < rannacher_steps else theta
        m_here, a12_here = operator(float(times[k]))
        rho_flat = rho.ravel()
        rhs = rho_flat + dt * cross_term(rho_flat, a12_next)
        if th < 1.0:
            rhs = rhs + (1 - th) * dt * (m_next @ rho_flat)
        f_edge_mid = 0.5 * (h.f(edge_pts, float(times[k]))
                            + h.f(edge_pts, float(times[k + 1])))
        f_accum = f_accum + f_edge_mid * dt
        # operator rows vanish on edge nodes, so the system is already the
        # identity there; Dirichlet data only enters through the RHS
        rhs[edge_flat] = edge_terminal * np.exp(-f_accum)
        if cached is None or cached[0] != th or not np.array_equal(cached[1], m_here.data):
            lu = splu(csc_matrix(ident - th * dt * m_here))
            cached = (th, m_here.data.copy(), lu)
        new = cached[2].solve(rhs)
        if np.any(new <= 0):
            bad = int(np.nonzero(~(new > 0))[0][0])
            raise PositivityError(
                f"nonpositive density at node {np.unravel_index(bad, (nx, ny))}, "
                f"t={times[k]:.6g}")
        rho = new.reshape(nx, ny)
        values[k] = rho
        m_next, a12_next = m_here, a12_here

    return values


def solve_value_pde(model: DiffusionModel, h: Hamiltonian, field_grid: FieldGrid,
                    boundary: str = "extrapolate", theta: float = 0.5,
                    rannacher_steps: int = 2) -> tuple[ScalarField, ScalarField]:
    """Solve the linear equation for rho = exp(-v) backward from exp(-g).

    Time stepping is the theta scheme (default trapezoid with two damped
    startup steps); space is second-order centered.  boundary="extrapolate"
    closes the walls by log-space quadratic extrapolation, refreshed by two
    corrector passes per step; boundary="frozen" pins the walls to the
    terminal datum propagated by the zero-dimensional decay equation.
    Returns (rho, v) with v = -log rho; rho is strictly positive or the
    solve raises.
    """
    if field_grid.ndim not in (1, 2):
        raise CapabilityError("PDE route supports 1- and 2-d spatial grids")
    if not model.uniformly_elliptic:
        raise CapabilityError("PDE route requires a uniformly elliptic model")
    if boundary not in ("extrapolate", "frozen"):
        raise ValueError("boundary must be 'extrapolate' or 'frozen'")
    probe = field_grid.points()
    t_probe = np.array([field_grid.times[0], field_grid.times[-1]])
    model.check_ellipticity(probe[:: max(1, len(probe) // 64)], t_probe)

    if field_grid.ndim == 1:
        values = _solve_pde_1d(model, h, field_grid, boundary, theta, rannacher_steps)
    else:
        values = _solve_pde_2d(model, h, field_grid, theta, rannacher_steps)
    rho = ScalarField(field_grid, values)
    v = ScalarField(field_grid, -np.log(values))
    return rho, v


def optimal_control(v: ScalarField) -> ControlField:
    """u* = -grad v as a clamped interpolated field (central differences)."""
    grads = v.gradient_values()
    components = tuple(ScalarField(v.grid, -g) for g in grads)
    lo = np.array([a[0] for a in v.grid.axes])
    hi = np.array([a[-1] for a in v.grid.axes])
    diameter = float(np.linalg.norm(hi - lo))

    def func(x: np.ndarray, t: float) -> np.ndarray:
        return np.stack([c.eval(x, t) for c in components], axis=1)

    return ControlField(func, domain_diameter=diameter, label="neg_grad_value")


def hjb_residual(v: ScalarField, model: DiffusionModel, h: Hamiltonian) -> ScalarField:
    """Residual of dv/dt + L v + f = (1/2) (grad v) a (grad v)^T on interior nodes.

    All derivatives are central differences; the returned field lives on the
    grid with one layer of time and space nodes trimmed away.
    """
    grid = v.grid
    if grid.ndim not in (1, 2):
        raise CapabilityError("HJB residual supports 1- and 2-d grids")
    times = grid.times
    dt_nodes = np.diff(times)
    if not np.allclose(dt_nodes, dt_nodes[0]):
        raise ValueError("HJB residual requires uniform time nodes")
    dt = dt_nodes[0]

    vt = (v.values[2:] - v.values[:-2]) / (2 * dt)
    grads = v.gradient_values()
    pts = grid.points()

    residual_slices = []
    for j, t in enumerate(times[1:-1], start=1):
        b = np.asarray(model.drift(pts, float(t)), dtype=float)
        a = model.a(pts, float(t))
        f = h.f(pts, float(t)).reshape(grid.shape)
        gv = [g[j] for g in grads]
        if grid.ndim == 1:
            (hx,) = grid.spacings()
            vxx = np.zeros(grid.shape)
            vxx[1:-1] = (v.values[j, 2:] - 2 * v.values[j, 1:-1] + v.values[j, :-2]) / hx ** 2
            lv = (b[:, 0].reshape(grid.shape) * gv[0]
                  + 0.5 * a[:, 0, 0].reshape(grid.shape) * vxx)
            quad = 0.5 * a[:, 0, 0].reshape(grid.shape) * gv[0] ** 2
        else:
            hx, hy = grid.spacings()
            vv = v.values[j]
            vxx = np.zeros(grid.shape)
            vyy = np.zeros(grid.shape)
            vxy = np.zeros(grid.shape)
            vxx[1:-1, :] = (vv[2:, :] - 2 * vv[1:-1, :] + vv[:-2, :]) / hx ** 2
            vyy[:, 1:-1] = (vv[:, 2:] - 2 * vv[:, 1:-1] + vv[:, :-2]) / hy ** 2
            vxy[1:-1, 1:-1] = (vv[2:, 2:] - vv[2:, :-2] - vv[:-2, 2:] + vv[:-2, :-2]) / (4 * hx * hy)
            a11 = a[:, 0, 0].reshape(grid.shape)
            a22 = a[:, 1, 1].reshape(grid.shape)
            a12 = a[:, 0, 1].reshape(grid.shape)
            lv = (b[:, 0].reshape(grid.shape) * gv[0] + b[:, 1].reshape(grid.shape) * gv[1]
                  + 0.5 * (a11 * vxx + a22 * vyy) + a12 * vxy)
            quad = 0.5 * (a11 * gv[0] ** 2 + 2 * a12 * gv[0] * gv[1] + a22 * gv[1] ** 2)
        residual_slices.append(vt[j - 1] + lv + f - quad)

    res = np.stack(residual_slices)
    trim = tuple(slice(1, -1) for _ in range(grid.ndim))
    res = res[(slice(None),) + trim]
    sub_axes = tuple(a[1:-1] for a in grid.axes)
    sub_grid = FieldGrid(sub_axes, times[1:-1])
    return ScalarField(sub_grid, res)


def control_cost_mc(model: DiffusionModel, control: ControlField, h: Hamiltonian,
                    z, grid: TimeGrid, n_paths: int, seed: int) -> ValueEstimate:
    """Expected cost of a control: running + quadratic effort + terminal."""
    ens = simulate_controlled(model, control, grid, init=z, n_paths=n_paths, seed=seed)
    dt = grid.dt
    times = grid.times()
    cost = h.g(ens.terminal).astype(float)
    for k in range(grid.n_steps):
        t = float(times[k])
        x = ens.states[:, k, :]
        s = model.sigma(x, t)
        u = np.asarray(control(x, t), dtype=float)
        c = np.einsum("pij,pi->pj", s, u)
        cost += (h.f(x, t) + 0.5 * np.sum(c * c, axis=1)) * dt
    se = float(cost.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else 0.0
    return ValueEstimate(value=float(cost.mean()), std_error=se, n_samples=n_paths)


def _ratio_jackknife(num: np.ndarray, den: np.ndarray) -> tuple[float, float]:
    """Leave-one-out std error of sum(num) / sum(den)."""
    n = len(den)
    a, b = num.sum(), den.sum()
    ratio = a / b
    if n < 2:
        return float(ratio), 0.0
    loo = (a - num) / (b - den)
    se = np.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2))
    return float(ratio), float(se)


def mc_optimal_control(model: DiffusionModel, h: Hamiltonian, z, s: float,
                       grid: TimeGrid, n_samples: int, seed: int
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Flow-derivative Monte Carlo estimate of u*(z, s).

    Along each reference path the energy gradient accumulates through the
    first-variation flow,

        xi = int_s^T (df/dx) Psi dt + (dg/dx)(X_T) Psi_T,

    and u*(z, s) = -E[xi Theta] / E[Theta] with Theta = exp(-H).  Returns
    the component estimates and their leave-one-out std errors.
    """
    if not s < grid.t_end:
        raise ValueError("start time must precede the terminal time")
    sub = grid.restrict(s)
    zvec = np.atleast_1d(np.asarray(z, dtype=float))
    n = model.state_dim
    dt = sub.dt
    times = sub.times()

    if model.drift_jacobian is None:
        raise CapabilityError("model provides no coefficient Jacobians")

    ens, psi_T, _ = _simulate_with_jacobian(model, sub, zvec, n_samples, seed)

    xi = np.zeros((n_samples, n))
    if h.running is not None:
        # re-walk the stored states against the stored noise to rebuild Psi_k
        psi = np.broadcast_to(np.eye(n), (n_samples, n, n)).copy()
        for k in range(sub.n_steps):
            t = float(times[k])
            x = ens.states[:, k, :]
            xi += np.einsum("pi,pij->pj", h.f_x(x, t), psi) * dt
            jb = np.asarray(model.drift_jacobian(x, t), dtype=float)
            dpsi = np.einsum("pij,pjk->pik", jb, psi) * dt
            if model.diffusion_jacobian is not None:
                js = np.asarray(model.diffusion_jacobian(x, t), dtype=float)
                dpsi = dpsi + np.einsum("pmij,pjk,pm->pik", js, psi,
                                        ens.noise_increments[:, k, :])
            psi = psi + dpsi
    xi += np.einsum("pi,pij->pj", h.g_x(ens.terminal), psi_T)

    h_vals = hamiltonian_eval_ensemble(h, ens)
    finite = np.isfinite(h_vals)
    if not np.any(finite):
        raise UnreliableEstimateError("every path has infinite energy")
    shift = float(np.min(h_vals[finite]))
    theta = np.exp(-(h_vals - shift))
    if theta.sum() <= 0:
        raise UnreliableEstimateError("partition estimate underflowed")

    estimate = np.empty(n)
    std_err = np.empty(n)
    for d in range(n):
        r, se = _ratio_jackknife(-xi[:, d] * theta, theta)
        estimate[d] = r
        std_err[d] = se
    return estimate, std_err
