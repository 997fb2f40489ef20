"""Density evolution, reversed drift, and reversal-as-control machinery.

Running a diffusion's marginal density forward with a conservative
finite-volume scheme yields p(x, t); the time-reversed process is again a
diffusion whose drift adds the density score to a sign-flipped, divergence-
corrected copy of the forward drift:

    reversed drift = b_hat + a_bar grad log p_bar,
    b_hat_i(x, t)  = -b_i(x, T - t) + sum_j d/dx_j a_bar_ij(x, t),

with a_bar(x, t) = a(x, T - t) and p_bar(x, t) = p(x, T - t).  Where the
density vanishes (below a floating-point floor) the score term is set to
zero.  The same objects admit a control-theoretic reading: the reversed
process is the optimally drifted version of the b_hat-driven reference under
the running cost div(b_hat) and terminal cost -log p(., 0), which this
module exposes for cross-validation against the value solvers.
"""

from __future__ import annotations

import numpy as np
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

from scipy import stats
from scipy.linalg import solve_banded

from . import rng
from .errors import CapabilityError, ConservationError, PositivityError, SupportError
from .grids import FieldGrid, GaussianLaw, GridMeasure, ScalarField, TimeGrid, trapezoid_weights
from .sde import ControlField, DiffusionModel, PathEnsemble, simulate_reference
from .value import Hamiltonian, ValueEstimate, estimate_value_mc, solve_value_pde

DENSITY_FLOOR = 1e-30


@dataclass(frozen=True)
class DensityEvolution:
    """Forward marginal density on a space-time grid plus mass bookkeeping."""

    field: ScalarField
    initial: np.ndarray
    mass_history: np.ndarray

    @property
    def grid(self) -> FieldGrid:
        return self.field.grid

    def terminal_density(self) -> np.ndarray:
        return self.field.values[-1]


def _cell_volume(grid: FieldGrid) -> float:
    return float(np.prod(grid.spacings()))


def _flux_matrix_1d(model: DiffusionModel, x: np.ndarray, t: float, hx: float):
    """Tridiagonal conservative operator rows for d p/dt = A p (zero flux)."""
    pts = x[:, None]
    b = np.asarray(model.drift(pts, t), dtype=float)[:, 0]
    a = model.a(pts, t)[:, 0, 0]
    n = len(x)
    b_mid = 0.5 * (b[:-1] + b[1:])
    # F_{i+1/2} = -b_mid * (p_i + p_{i+1})/2 + ((a p)_{i+1} - (a p)_i)/(2 h)
    lo = np.zeros(n)   # coefficient of p_{i-1} in dp_i/dt
    di = np.zeros(n)
    hi = np.zeros(n)
    c_adv = -0.5 * b_mid
    c_dif = 0.5 / hx
    # contribution of F_{i+1/2} to dp_i/dt is +F/h; to dp_{i+1}/dt is -F/h
    #   F_{i+1/2} = c_adv[i] (p_i + p_{i+1}) + c_dif (a_{i+1} p_{i+1} - a_i p_i)
    f_pi = c_adv - c_dif * a[:-1]          # dF_{i+1/2} / dp_i
    f_pi1 = c_adv + c_dif * a[1:]          # dF_{i+1/2} / dp_{i+1}
    di[:-1] += f_pi / hx
    hi[:-1] += f_pi1 / hx
    di[1:] -= f_pi1 / hx
    lo[1:] -= f_pi / hx
    return lo, di, hi


def _advance_density_1d(model, p0, grid: FieldGrid, theta, rannacher_steps):
    x = grid.axes[0]
    (hx,) = grid.spacings()
    times = grid.times
    nt = len(times) - 1
    values = np.empty((nt + 1, len(x)))
    values[0] = p0
    p = p0.copy()
    lo_k, di_k, hi_k = _flux_matrix_1d(model, x, float(times[0]), hx)
    for k in range(nt):
        dt = float(times[k + 1] - times[k])
        th = 1.0 if k < rannacher_steps else theta
        lo_n, di_n, hi_n = _flux_matrix_1d(model, x, float(times[k + 1]), hx)
        rhs = p.copy()
        if th < 1.0:
            ap = np.zeros_like(p)
            ap += di_k * p
            ap[:-1] += hi_k[:-1] * p[1:]
            ap[1:] += lo_k[1:] * p[:-1]
            rhs = p + (1 - th) * dt * ap
        ab = np.zeros((3, len(x)))
        ab[1] = 1.0 - th * dt * di_n
        ab[0, 1:] = -th * dt * hi_n[:-1]
        ab[2, :-1] = -th * dt * lo_n[1:]
        p = solve_banded((1, 1), ab, rhs)
        values[k + 1] = p
        lo_k, di_k, hi_k = lo_n, di_n, hi_n
    return values


def _advance_density_2d(model, p0, grid: FieldGrid, theta, rannacher_steps):
    """Dimension-split conservative update; requires diagonal diffusion."""
    ax, ay = grid.axes
    hx, hy = grid.spacings()
    times = grid.times
    nt = len(times) - 1
    nx, ny = len(ax), len(ay)
    pts = grid.points()

    a_probe = model.a(pts, float(times[0]))
    if np.abs(a_probe[:, 0, 1]).max() > 1e-14:
        raise CapabilityError("2-d density solver requires diagonal diffusion")

    values = np.empty((nt + 1, nx, ny))
    values[0] = p0
    p = p0.copy()

    def sweep(p_in, axis, t0, t1, th, dt):
        # implicit theta step of the axis-aligned flux operator
        out = np.empty_like(p_in)
        if axis == 0:
            lines = p_in.T  # iterate over y-lines
        else:
            lines = p_in
        for j in range(lines.shape[0]):
            if axis == 0:
                pts_line = np.stack([ax, np.full(nx, ay[j])], axis=1)
                h = hx
            else:
                pts_line = np.stack([np.full(ny, ax[j]), ay], axis=1)
                h = hy
            sub_model = _LineModel(model, pts_line, axis)
            lo_n, di_n, hi_n = _flux_matrix_1d(sub_model, np.arange(len(pts_line)) * h,
                                               t1, h)
            line = lines[j]
            rhs = line.copy()
            if th < 1.0:
                lo_k, di_k, hi_k = _flux_matrix_1d(sub_model,
                                                   np.arange(len(pts_line)) * h, t0, h)
                ap = di_k * line
                ap[:-1] += hi_k[:-1] * line[1:]
                ap[1:] += lo_k[1:] * line[:-1]
                rhs = line + (1 - th) * dt * ap
            ab = np.zeros((3, len(line)))
            ab[1] = 1.0 - th * dt * di_n
            ab[0, 1:] = -th * dt * hi_n[:-1]
            ab[2, :-1] = -th * dt * lo_n[1:]
            out_line = solve_banded((1, 1), ab, rhs)
            if axis == 0:
                out[:, j] = out_line
            else:
                out[j, :] = out_line
        return out

    for k in range(nt):
        dt = float(times[k + 1] - times[k])
        th = 1.0 if k < rannacher_steps else theta
        t0, t1 = float(times[k]), float(times[k + 1])
        p = sweep(p, 0, t0, t1, th, dt)
        p = sweep(p, 1, t0, t1, th, dt)
        values[k + 1] = p
    return values


class _LineModel:
    """1-d restriction of a 2-d model along one axis (for split sweeps)."""

    def __init__(self, model: DiffusionModel, pts_line: np.ndarray, axis: int):
        self._model = model
        self._pts = pts_line
        self._axis = axis

    def drift(self, x, t):
        return np.asarray(self._model.drift(self._pts, t), dtype=float)[:, self._axis][:, None]

    def a(self, x, t):
        return self._model.a(self._pts, t)[:, self._axis, self._axis][:, None, None]


def solve_forward_kolmogorov(model: DiffusionModel, p0: np.ndarray,
                             field_grid: FieldGrid, theta: float = 0.5,
                             rannacher_steps: int = 2) -> DensityEvolution:
    """Conservative finite-volume solve of the forward density equation.

    Zero-flux walls conserve the cell mass exactly (up to the linear solver);
    the theta time default is the trapezoid rule with two damped startup
    steps.  Raises on mass drift beyond 1e-3 or densities below -1e-12.
    """
    if field_grid.ndim not in (1, 2):
        raise CapabilityError("density solves support 1- and 2-d grids")
    p0 = np.asarray(p0, dtype=float)
    if p0.shape != field_grid.shape:
        raise ValueError("p0 must be tabulated on the spatial grid")
    if np.any(p0 < 0):
        raise PositivityError("initial density must be nonnegative")
    vol = _cell_volume(field_grid)
    mass0 = float(p0.sum() * vol)
    if abs(mass0 - 1.0) > 1e-6:
        raise ValueError(f"initial density has cell mass {mass0:.8f}, expected 1")
    p0 = p0 / mass0

    if field_grid.ndim == 1:
        values = _advance_density_1d(model, p0, field_grid, theta, rannacher_steps)
    else:
        values = _advance_density_2d(model, p0, field_grid, theta, rannacher_steps)

    flat = values.reshape(values.shape[0], -1)
    mass = flat.sum(axis=1) * vol
    if np.any(np.abs(mass - 1.0) > 1e-3):
        worst = int(np.argmax(np.abs(mass - 1.0)))
        raise ConservationError(
            f"cell mass drifted to {mass[worst]:.6f} at t={field_grid.times[worst]:.4g}")
    if flat.min() < -1e-12:
        k, i = np.unravel_index(int(values.argmin()), values.shape[:1] + (flat.shape[1],))
        raise PositivityError(
            f"density fell to {flat.min():.3e} at t={field_grid.times[k]:.4g}")
    values = np.maximum(values, 0.0)
    return DensityEvolution(field=ScalarField(field_grid, values),
                            initial=p0, mass_history=mass)


def _score_values(p_slice: np.ndarray, spacings, floor: float) -> tuple[np.ndarray, ...]:
    """Central differences of log density per axis, zeroed below the floor."""
    safe = np.maximum(p_slice, floor)
    log_p = np.log(safe)
    grads = np.gradient(log_p, *spacings) if p_slice.ndim > 1 else \
        (np.gradient(log_p, spacings[0]),)
    if p_slice.ndim == 1 and not isinstance(grads, tuple):
        grads = (grads,)
    mask = p_slice >= floor
    return tuple(np.where(mask, g, 0.0) for g in grads)


def _divergence_of_a(model: DiffusionModel, grid: FieldGrid, t_fwd: float) -> np.ndarray:
    """sum_j d/dx_j a_ij on the grid at forward time t_fwd, per component i."""
    pts = grid.points()
    a = model.a(pts, t_fwd)
    d = grid.ndim
    shape = grid.shape
    out = np.zeros((d,) + shape)
    spacings = grid.spacings()
    for i in range(d):
        for j in range(d):
            comp = a[:, i, j].reshape(shape)
            out[i] += np.gradient(comp, spacings[j], axis=j)
    return out


@dataclass(frozen=True)
class ReversedModel:
    """Reversed-time coefficient bundle derived from a density evolution."""

    base: DiffusionModel
    t_end: float
    p_bar: ScalarField                         # p(x, T - t) on reversal time
    drift_fields: tuple[ScalarField, ...]       # components of the reversed drift
    b_hat_fields: tuple[ScalarField, ...]
    score_fields: tuple[ScalarField, ...]
    floor: float

    def sigma_bar(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.base.sigma(x, self.t_end - t)

    def reversed_drift_at(self, x: np.ndarray, t: float) -> np.ndarray:
        return np.stack([f.eval(x, t) for f in self.drift_fields], axis=1)

    def as_diffusion_model(self) -> DiffusionModel:
        def drift(x, t):
            return self.reversed_drift_at(x, t)

        def diffusion(x, t):
            return self.sigma_bar(x, t)

        terminal = self.p_bar.values[0]
        if self.p_bar.grid.ndim == 1:
            law = GridMeasure.from_density(self.p_bar.grid.axes[0], terminal,
                                           normalize=True)
        else:
            law = None
        return DiffusionModel(
            state_dim=self.base.state_dim, noise_dim=self.base.noise_dim,
            drift=drift, diffusion=diffusion, initial_law=law,
            uniformly_elliptic=self.base.uniformly_elliptic,
            ellipticity_constant=self.base.ellipticity_constant,
            name=f"reversed({self.base.name})")


def reversed_drift(evolution: DensityEvolution, model: DiffusionModel,
                   floor: float = DENSITY_FLOOR) -> ReversedModel:
    """Assemble the reversed-time drift field from the solved density.

    The drift is built in the decomposed form b_hat + a_bar * score with one
    shared set of stencils, so the product-rule identity between the two
    textbook forms holds exactly on the grid by construction.
    """
    grid = evolution.grid
    t_end = float(grid.times[-1])
    d = grid.ndim
    spacings = grid.spacings()
    n_times = len(grid.times)
    pts = grid.points()

    p_bar_vals = evolution.field.values[::-1].copy()
    score_vals = np.zeros((d, n_times) + grid.shape)
    b_hat_vals = np.zeros((d, n_times) + grid.shape)
    drift_vals = np.zeros((d, n_times) + grid.shape)

    for k, t_rev in enumerate(grid.times):
        t_fwd = t_end - float(t_rev)
        scores = _score_values(p_bar_vals[k], spacings, floor)
        div_a = _divergence_of_a(model, grid, t_fwd)
        b_fwd = np.asarray(model.drift(pts, t_fwd), dtype=float)
        a_bar = model.a(pts, t_fwd)
        for i in range(d):
            b_hat = -b_fwd[:, i].reshape(grid.shape) + div_a[i]
            a_score = np.zeros(grid.shape)
            for j in range(d):
                a_score += a_bar[:, i, j].reshape(grid.shape) * scores[j]
            b_hat_vals[i, k] = b_hat
            score_vals[i, k] = scores[i]
            drift_vals[i, k] = b_hat + a_score

    rev_grid = FieldGrid(grid.axes, grid.times)
    return ReversedModel(
        base=model, t_end=t_end,
        p_bar=ScalarField(rev_grid, p_bar_vals),
        drift_fields=tuple(ScalarField(rev_grid, drift_vals[i]) for i in range(d)),
        b_hat_fields=tuple(ScalarField(rev_grid, b_hat_vals[i]) for i in range(d)),
        score_fields=tuple(ScalarField(rev_grid, score_vals[i]) for i in range(d)),
        floor=floor)


def _initial_log_density(model: DiffusionModel):
    law = model.initial_law
    if isinstance(law, GaussianLaw):
        return lambda x: law.log_density(x)
    if isinstance(law, GridMeasure):
        nodes, dens = law.nodes, law.density
        if np.any(dens <= 0):
            raise SupportError("initial density must be positive on its grid")
        log_d = np.log(dens)
        return lambda x: np.interp(x[:, 0], nodes, log_d)
    raise CapabilityError("model must carry a Gaussian or grid initial law")


def reversal_hamiltonian(model: DiffusionModel, t_end: float,
                         fd_step: float = 1e-5) -> Hamiltonian:
    """Tilt whose value problem on the b_hat reference reproduces -log p_bar.

    Running cost: divergence of the corrected reversed drift b_hat (central
    finite differences); terminal cost: -log of the initial density.
    """
    log_p0 = _initial_log_density(model)
    n = model.state_dim

    def b_hat(x: np.ndarray, t: float) -> np.ndarray:
        t_fwd = t_end - t
        out = -np.asarray(model.drift(x, t_fwd), dtype=float)
        for j in range(n):
            shift = np.zeros((1, n))
            shift[0, j] = fd_step
            a_plus = model.a(x + shift, t_fwd)
            a_minus = model.a(x - shift, t_fwd)
            out += (a_plus[:, :, j] - a_minus[:, :, j]) / (2 * fd_step)
        return out

    def running(x: np.ndarray, t: float) -> np.ndarray:
        div = np.zeros(x.shape[0])
        for i in range(n):
            shift = np.zeros((1, n))
            shift[0, i] = fd_step
            div += (b_hat(x + shift, t)[:, i] - b_hat(x - shift, t)[:, i]) / (2 * fd_step)
        return div

    def terminal(x: np.ndarray) -> np.ndarray:
        return -log_p0(x)

    return Hamiltonian(running=running, terminal=terminal,
                       name=f"reversal({model.name})")


def reversal_reference_model(model: DiffusionModel, t_end: float,
                             fd_step: float = 1e-5) -> DiffusionModel:
    """The b_hat-driven reference diffusion of the reversal control problem."""
    n = model.state_dim

    def drift(x, t):
        t_fwd = t_end - t
        out = -np.asarray(model.drift(x, t_fwd), dtype=float)
        for j in range(n):
            shift = np.zeros((1, n))
            shift[0, j] = fd_step
            out += (model.a(x + shift, t_fwd)[:, :, j]
                    - model.a(x - shift, t_fwd)[:, :, j]) / (2 * fd_step)
        return out

    def diffusion(x, t):
        return model.sigma(x, t_end - t)

    return DiffusionModel(
        state_dim=n, noise_dim=model.noise_dim,
        drift=drift, diffusion=diffusion,
        uniformly_elliptic=model.uniformly_elliptic,
        ellipticity_constant=model.ellipticity_constant,
        name=f"b_hat({model.name})")


@dataclass(frozen=True)
class ValueCheckReport:
    max_discrepancy: float
    probe_window: tuple
    mc_probes: tuple          # (z, s, estimate, std_error, target) rows
    value_field: ScalarField
    neg_log_p_bar: ScalarField

    @property
    def mc_all_within_3se(self) -> bool:
        return all(abs(est - target) <= 3 * se + 1e-3
                   for (_, _, est, se, target) in self.mc_probes)


def reversal_value_check(model: DiffusionModel, p0: np.ndarray,
                         field_grid: FieldGrid,
                         probe_bounds: Optional[Sequence[tuple[float, float]]] = None,
                         mc_probes: Sequence[tuple[float, float]] = (),
                         mc_samples: int = 20_000, seed: int = 0) -> ValueCheckReport:
    """Cross-validate -log p_bar against the value-problem route.

    Solves the forward density equation, then solves the value PDE of the
    reversal control problem on the same grid, and reports the maximum
    discrepancy over the probe window plus Monte Carlo value estimates at
    the requested (z, s) probes.
    """
    if field_grid.ndim != 1:
        raise CapabilityError("the value cross-check is one-dimensional")
    evolution = solve_forward_kolmogorov(model, p0, field_grid)
    p_bar = evolution.field.values[::-1].copy()

    h = reversal_hamiltonian(model, float(field_grid.times[-1]))
    reference = reversal_reference_model(model, float(field_grid.times[-1]))
    _, v = solve_value_pde(reference, h, field_grid)

    neg_log = -np.log(np.maximum(p_bar, DENSITY_FLOOR))
    x = field_grid.axes[0]
    if probe_bounds is None:
        window = np.ones(len(x), dtype=bool)
        window[[0, -1]] = False
    else:
        (lo, hi), = probe_bounds
        window = (x >= lo) & (x <= hi)
    usable = p_bar > 1e-12
    diff = np.abs(v.values - neg_log)
    masked = np.where(usable[:, :] & window[None, :], diff, 0.0)
    max_disc = float(masked.max())

    rows = []
    for (z, s) in mc_probes:
        est = estimate_value_mc(reference, h, np.array([z]), s,
                                field_grid.time_grid(), mc_samples, seed)
        target = float(-np.log(max(evolution.field.eval(np.array([[z]]),
                                                        float(field_grid.times[-1]) - s)[0],
                                   DENSITY_FLOOR)))
        rows.append((float(z), float(s), est.value, est.std_error, target))
        seed += 1

    return ValueCheckReport(max_discrepancy=max_disc,
                            probe_window=tuple(np.nonzero(window)[0][[0, -1]]),
                            mc_probes=tuple(rows),
                            value_field=v,
                            neg_log_p_bar=ScalarField(field_grid, neg_log))


@dataclass(frozen=True)
class MarginalRow:
    probe_t: float
    forward_mean: float
    forward_var: float
    reversed_mean: float
    reversed_var: float
    ks_stat: float
    ks_pvalue: float
    moments_pass: bool


@dataclass(frozen=True)
class ReversalReport:
    forward: PathEnsemble
    reversed: PathEnsemble
    rows: tuple[MarginalRow, ...]
    reversed_model: ReversedModel

    @property
    def all_pass(self) -> bool:
        return all(r.moments_pass for r in self.rows)


def simulate_reversal(model: DiffusionModel, p0: np.ndarray, field_grid: FieldGrid,
                      n_paths: int, seed: int,
                      probes: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0)
                      ) -> ReversalReport:
    """Simulate the diffusion and its reversal; compare marginals at probes.

    The reversed ensemble starts from grid inverse-CDF draws of the solved
    terminal density; its marginal at reversal time t is checked against the
    forward marginal at T - t (first two moments within three combined std
    errors, plus a two-sample KS statistic for reference).
    """
    if not model.uniformly_elliptic:
        raise CapabilityError("reversal requires a uniformly elliptic model "
                              "(the density machinery needs nondegenerate noise)")
    if field_grid.ndim != 1:
        raise CapabilityError("reversal simulation is one-dimensional")

    evolution = solve_forward_kolmogorov(model, p0, field_grid)
    rev = reversed_drift(evolution, model)
    t_end = float(field_grid.times[-1])
    time_grid = field_grid.time_grid()

    init_fwd = model.initial_law
    if init_fwd is None:
        init_fwd = GridMeasure.from_density(field_grid.axes[0], p0, normalize=True)
    fwd = simulate_reference(model, time_grid, init=init_fwd,
                             n_paths=n_paths, seed=seed)
    rev_model = rev.as_diffusion_model()
    bwd = simulate_reference(rev_model, time_grid, init=rev_model.initial_law,
                             n_paths=n_paths, seed=seed + 1)

    times = time_grid.times()
    rows = []
    for probe in probes:
        k_rev = int(np.argmin(np.abs(times - probe)))
        k_fwd = int(np.argmin(np.abs(times - (t_end - probe))))
        xr = bwd.states[:, k_rev, 0]
        xf = fwd.states[:, k_fwd, 0]
        se_mean = np.hypot(xr.std() / np.sqrt(n_paths), xf.std() / np.sqrt(n_paths))
        se_var = np.hypot(xr.var() * np.sqrt(2.0 / n_paths),
                          xf.var() * np.sqrt(2.0 / n_paths))
        ok = (abs(xr.mean() - xf.mean()) <= 3 * se_mean + 1e-3
              and abs(xr.var() - xf.var()) <= 3 * se_var + 1e-3)
        ks = stats.ks_2samp(xr, xf)
        rows.append(MarginalRow(
            probe_t=float(probe),
            forward_mean=float(xf.mean()), forward_var=float(xf.var()),
            reversed_mean=float(xr.mean()), reversed_var=float(xr.var()),
            ks_stat=float(ks.statistic), ks_pvalue=float(ks.pvalue),
            moments_pass=bool(ok)))

    return ReversalReport(forward=fwd, reversed=bwd, rows=tuple(rows),
                          reversed_model=rev)


def reversal_free_energy(evolution: DensityEvolution) -> float:
    """Differential entropy of the terminal density by grid quadrature."""
    grid = evolution.grid
    p = evolution.terminal_density()
    if grid.ndim == 1:
        w = trapezoid_weights(grid.axes[0])
    else:
        w = np.multiply.outer(trapezoid_weights(grid.axes[0]),
                              trapezoid_weights(grid.axes[1]))
    mask = p > 0
    return float(-np.sum(p[mask] * np.log(p[mask]) * w[mask]))
