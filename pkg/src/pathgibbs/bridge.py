"""Entropic bridges between prescribed marginals of a diffusion.

Given the transition density p(z, y; 0, T) of a nondegenerate reference
diffusion and two marginals mu (initial) and mu' (terminal), the bridge
problem finds potentials nu, nu' such that the coupling

    pi(dz, dy) = p(z, y; 0, T) nu(dz) nu'(dy)

has marginals mu and mu'.  On a grid this is solved by the classical
alternating marginal-fitting sweep (Fortet / iterative proportional
fitting), run in the log domain for stability.  The drifted sampler that
realizes the bridge uses the terminal potential's density q through
rho(z, t) = E q(X_T^{z,t}), solved as a running-cost-free value problem, and
steers with u* = grad log rho.  The special case of a point-mass start and a
Brownian reference recovers the classical minimum-energy drift toward a
prescribed terminal law.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import rng
from .errors import CapabilityError, ConvergenceError, PositivityError, SupportError
from .grids import FieldGrid, GridMeasure, ScalarField, TimeGrid, trapezoid_weights
from .sde import ControlField, DiffusionModel, PathEnsemble, simulate_controlled
from .value import Hamiltonian, solve_value_pde


@dataclass(frozen=True)
class TransitionKernel:
    """Transition densities p(z_i -> y_j over [0, T]) w.r.t. target quadrature."""

    source: np.ndarray
    target: np.ndarray
    density: np.ndarray          # (n_src, n_tgt), strictly positive
    target_weights: np.ndarray
    t_end: float

    def __post_init__(self):
        object.__setattr__(self, "source", np.asarray(self.source, dtype=float))
        object.__setattr__(self, "target", np.asarray(self.target, dtype=float))
        object.__setattr__(self, "density", np.asarray(self.density, dtype=float))
        object.__setattr__(self, "target_weights",
                           np.asarray(self.target_weights, dtype=float))
        if self.density.shape != (len(self.source), len(self.target)):
            raise ValueError("kernel density must be (n_source, n_target)")
        if np.any(self.density <= 0):
            bad = np.argwhere(self.density <= 0)[0]
            raise PositivityError(
                f"kernel density nonpositive at source node {self.source[bad[0]]:.4g}, "
                f"target node {self.target[bad[1]]:.4g}")
        row_mass = self.density @ self.target_weights
        if np.any(np.abs(row_mass - 1.0) > 1e-6):
            worst = int(np.argmax(np.abs(row_mass - 1.0)))
            raise ValueError(
                f"kernel row at z={self.source[worst]:.4g} integrates to "
                f"{row_mass[worst]:.8f}, not 1")


def build_kernel(model: DiffusionModel, grid_src: np.ndarray, grid_tgt: np.ndarray,
                 t_end: float, method: str = "closed_form_gaussian",
                 n_time_steps: int = 400) -> TransitionKernel:
    """Tabulate the reference transition density between two spatial grids.

    method="closed_form_gaussian" uses the model's closed-form transition
    (Brownian- or linear-drift-type models); method="kolmogorov_solve" runs
    the conservative forward solver from a near-delta start at every source
    node, bootstrapped by a short-time Gaussian step to keep the solve
    positive (requires grid_src == grid_tgt).
    """
    grid_src = np.asarray(grid_src, dtype=float)
    grid_tgt = np.asarray(grid_tgt, dtype=float)
    w_tgt = trapezoid_weights(grid_tgt)

    if method == "closed_form_gaussian":
        if model.closed_form_transition is None:
            raise CapabilityError("model has no closed-form transition density")
        dens = np.asarray(model.closed_form_transition(grid_src, grid_tgt, 0.0, t_end),
                          dtype=float)
    elif method == "kolmogorov_solve":
        from .reversal import solve_forward_kolmogorov
        if not model.uniformly_elliptic:
            raise CapabilityError("kolmogorov_solve requires a uniformly elliptic model")
        if len(grid_src) != len(grid_tgt) or not np.allclose(grid_src, grid_tgt):
            raise ValueError("kolmogorov_solve requires matching source and target grids")
        # short-time Gaussian bootstrap avoids feeding the solver a raw delta
        t0 = 4.0 * t_end / n_time_steps
        field_grid = FieldGrid((grid_tgt,), np.linspace(t0, t_end, n_time_steps + 1))
        cell = float(grid_tgt[1] - grid_tgt[0])
        dens = np.empty((len(grid_src), len(grid_tgt)))
        for i, z in enumerate(grid_src):
            zvec = np.array([[z]])
            mean = z + float(model.drift(zvec, 0.0)[0, 0]) * t0
            var = float(model.a(zvec, 0.0)[0, 0, 0]) * t0
            p0 = np.exp(-(grid_tgt - mean) ** 2 / (2 * var)) / np.sqrt(2 * np.pi * var)
            p0 = p0 / (p0.sum() * cell)  # the solver's cell-mass convention
            evolution = solve_forward_kolmogorov(model, p0, field_grid)
            dens[i] = evolution.field.values[-1]
    else:
        raise ValueError(f"unknown kernel method: {method}")

    if dens.min() < -1e-12:
        bad = np.argwhere(dens < -1e-12)[0]
        raise PositivityError(
            f"kernel solve produced a negative density at source node "
            f"{grid_src[bad[0]]:.4g}, target node {grid_tgt[bad[1]]:.4g}")
    # far tails underflow float64; the true density is positive, so floor it
    dens = np.maximum(dens, 1e-300)
    dens = dens / (dens @ w_tgt)[:, None]
    return TransitionKernel(grid_src, grid_tgt, dens, w_tgt, t_end)


@dataclass(frozen=True)
class BridgeSolution:
    """Potentials, coupling, and convergence diagnostics of one bridge solve."""

    nu: GridMeasure
    nu_prime: GridMeasure
    q: np.ndarray                # nu' density on the target grid
    coupling: np.ndarray         # pi masses on source x target nodes
    iterations: int
    residual: float
    residual_history: tuple

    def marginals(self) -> tuple[np.ndarray, np.ndarray]:
        return self.coupling.sum(axis=1), self.coupling.sum(axis=0)


def _tv(a: np.ndarray, b: np.ndarray) -> float:
    return 0.5 * float(np.abs(a - b).sum())


def fortet_iteration(kernel: TransitionKernel, mu: GridMeasure, mu_prime: GridMeasure,
                     tol: float = 1e-10, max_iter: int = 500) -> BridgeSolution:
    """Alternating marginal-fitting sweep for the bridge potentials.

    Updates, in the log domain,

        nu'_j <- mu'_j / sum_i p_ij nu_i w_i,
        nu_i  <- mu_i  / sum_j p_ij nu'_j w_j,

    until both coupling marginals match the prescriptions in total variation.
    The (c, 1/c) gauge freedom of the potential pair is fixed by scaling nu
    to unit quadrature mass over the support of mu.
    """
    if not np.array_equal(kernel.source, mu.nodes):
        raise ValueError("mu must live on the kernel's source grid")
    if not np.array_equal(kernel.target, mu_prime.nodes):
        raise ValueError("mu_prime must live on the kernel's target grid")

    w_src = mu.weights
    w_tgt = kernel.target_weights
    with np.errstate(divide="ignore"):
        log_k = np.log(kernel.density)
        log_mu = np.log(mu.density)
        log_mu_p = np.log(mu_prime.density)
        log_w_src = np.log(w_src)
        log_w_tgt = np.log(w_tgt)

    support = mu.density > 0
    support_p = mu_prime.density > 0
    log_nu = log_mu.copy()
    log_nu_p = np.full(len(kernel.target), -np.inf)

    history = []
    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        with np.errstate(invalid="ignore"):
            image = logsumexp(log_k + (log_nu + log_w_src)[:, None], axis=0,
                              b=support[:, None].astype(float))
            log_nu_p = np.where(support_p, log_mu_p - image, -np.inf)
            back = logsumexp(log_k + (log_nu_p + log_w_tgt)[None, :], axis=1,
                             b=support_p[None, :].astype(float))
            log_nu = np.where(support, log_mu - back, -np.inf)

        # coupling marginal residuals in total variation
        log_pi = (log_nu + log_w_src)[:, None] + log_k + (log_nu_p + log_w_tgt)[None, :]
        pi = np.exp(log_pi, where=np.isfinite(log_pi), out=np.zeros_like(log_pi))
        res = max(_tv(pi.sum(axis=1), mu.masses), _tv(pi.sum(axis=0), mu_prime.masses))
        history.append(res)
        iterations = it
        if res < tol:
            converged = True
            break

    if not converged:
        raise ConvergenceError(
            f"marginal fitting stalled at residual {history[-1]:.3e} "
            f"after {max_iter} iterations", residual_history=history)

    # gauge: unit quadrature mass of nu over supp(mu)
    log_scale = logsumexp((log_nu + log_w_src)[support])
    log_nu = log_nu - log_scale
    log_nu_p = log_nu_p + log_scale
    nu_density = np.exp(log_nu, where=np.isfinite(log_nu), out=np.zeros_like(log_nu))
    nu_p_density = np.exp(log_nu_p, where=np.isfinite(log_nu_p),
                          out=np.zeros_like(log_nu_p))
    log_pi = (log_nu + log_w_src)[:, None] + log_k + (log_nu_p + log_w_tgt)[None, :]
    pi = np.exp(log_pi, where=np.isfinite(log_pi), out=np.zeros_like(log_pi))

    return BridgeSolution(
        nu=GridMeasure(mu.nodes, nu_density, w_src, kind="sigma_finite"),
        nu_prime=GridMeasure(mu_prime.nodes, nu_p_density, w_tgt, kind="sigma_finite"),
        q=nu_p_density,
        coupling=pi,
        iterations=iterations,
        residual=history[-1],
        residual_history=tuple(history))


def bridge_control(model: DiffusionModel, q: np.ndarray, field_grid: FieldGrid,
                   boundary: str = "extrapolate") -> ControlField:
    """Steering drift for the terminal potential density q.

    Solves the running-cost-free value problem with terminal datum q on the
    field grid (rho(z, t) = E q(X_T^{z,t})) and returns u* = grad log rho as
    a clamped field.  q must be strictly positive on the grid.
    """
    if field_grid.ndim != 1:
        raise CapabilityError("bridge controls are supported on 1-d grids")
    q = np.asarray(q, dtype=float)
    if q.shape != field_grid.shape:
        raise ValueError("q must be tabulated on the field grid's spatial axis")
    if np.any(q <= 0):
        raise SupportError("terminal potential density must be strictly positive")

    nodes = field_grid.axes[0]
    log_q = np.log(q)

    def g(x):
        return -np.interp(x[:, 0], nodes, log_q)

    h = Hamiltonian(terminal=g, name="bridge_terminal")
    _, v = solve_value_pde(model, h, field_grid, boundary=boundary)
    from .value import optimal_control
    return optimal_control(v)


def follmer_drift(mu_prime: GridMeasure, t_end: float,
                  field_grid: Optional[FieldGrid] = None,
                  model: Optional[DiffusionModel] = None) -> ControlField:
    """Point-start Brownian bridge drift toward the terminal law mu_prime.

    Specializes bridge_control to a standard Brownian reference started at
    the origin: the terminal potential is the density of mu_prime divided by
    the centered Gaussian density with variance t_end.
    """
    if np.any(mu_prime.density <= 0):
        raise SupportError("mu_prime must have a strictly positive density on its grid")
    if model is None:
        model = DiffusionModel(
            state_dim=1, noise_dim=1,
            drift=lambda x, t: np.zeros_like(x),
            diffusion=lambda x, t: np.ones((1, 1)),
            uniformly_elliptic=True, ellipticity_constant=1.0,
            name="brownian_1d")
    if field_grid is None:
        nodes = mu_prime.nodes
        field_grid = FieldGrid((nodes,), np.linspace(0.0, t_end, 401))
    nodes = field_grid.axes[0]
    dens = np.interp(nodes, mu_prime.nodes, mu_prime.density)
    if np.any(dens <= 0):
        raise SupportError("mu_prime density vanishes on the control grid")
    gauss = np.exp(-nodes ** 2 / (2 * t_end)) / np.sqrt(2 * np.pi * t_end)
    return bridge_control(model, dens / gauss, field_grid)


def bridge_sample(model: DiffusionModel, control: ControlField, mu: GridMeasure,
                  grid: TimeGrid, n_paths: int, seed: int) -> PathEnsemble:
    """Simulate the drifted process from initial draws distributed as mu."""
    if mu.is_dirac():
        init = np.array([mu.nodes[0]])
        return simulate_controlled(model, control, grid, init=init,
                                   n_paths=n_paths, seed=seed)
    return simulate_controlled(model, control, grid, init=mu,
                               n_paths=n_paths, seed=seed)


def grid_relative_entropy(p: GridMeasure, q_density: np.ndarray,
                          q_weights: Optional[np.ndarray] = None) -> float:
    """D(p || q) by quadrature, q given as density values on p's grid.

    Defined for sigma-finite q (unnormalized densities allowed).  Returns
    +inf if p puts mass where q vanishes.
    """
    q_density = np.asarray(q_density, dtype=float)
    mask = p.density > 0
    if np.any(mask & (q_density <= 0)):
        return np.inf
    ratio = np.log(p.density[mask] / q_density[mask])
    return float(np.sum(p.masses[mask] * ratio))


@dataclass(frozen=True)
class EffortReport:
    """Quadrature and sampled views of the bridge's quadratic control effort."""

    effort: float                      # D(mu' || image of nu) - D(mu || nu)
    divergence_target: float           # D(mu' || nu~')
    divergence_source: float           # D(mu || nu)
    mc_effort: Optional[float] = None
    mc_std_error: Optional[float] = None


def ensemble_control_energy(ensemble: PathEnsemble, model: DiffusionModel,
                            control: ControlField) -> tuple[float, float]:
    """(mean, std error) of (1/2) sum |sigma^T u|^2 dt along the ensemble."""
    dt = ensemble.grid.dt
    times = ensemble.grid.times()
    total = np.zeros(ensemble.n_paths)
    for k in range(ensemble.grid.n_steps):
        t = float(times[k])
        x = ensemble.states[:, k, :]
        s = model.sigma(x, t)
        u = np.asarray(control(x, t), dtype=float)
        c = np.einsum("pij,pi->pj", s, u)
        total += 0.5 * np.sum(c * c, axis=1) * dt
    se = float(total.std(ddof=1) / np.sqrt(len(total))) if len(total) > 1 else 0.0
    return float(total.mean()), se


def control_effort(solution: BridgeSolution, kernel: TransitionKernel,
                   mu: GridMeasure, mu_prime: GridMeasure,
                   sample: Optional[PathEnsemble] = None,
                   model: Optional[DiffusionModel] = None,
                   control: Optional[ControlField] = None) -> EffortReport:
    """Minimum quadratic effort D(mu' || nu~') - D(mu || nu) by quadrature.

    nu~' is the kernel image of the initial potential nu.  Both divergences
    use the sigma-finite extension (the potentials are unnormalized); their
    difference is invariant under the (c, 1/c) potential gauge.  When a
    sampled bridge ensemble plus its model and control are supplied, the
    pathwise energy estimate is included for cross-checking.
    """
    nu_image = (solution.nu.masses @ kernel.density)
    d_target = grid_relative_entropy(mu_prime, nu_image)
    d_source = grid_relative_entropy(mu, solution.nu.density)
    mc_eff = mc_se = None
    if sample is not None:
        if model is None or control is None:
            raise ValueError("sampled cross-check needs the model and control")
        mc_eff, mc_se = ensemble_control_energy(sample, model, control)
    return EffortReport(effort=d_target - d_source,
                        divergence_target=d_target,
                        divergence_source=d_source,
                        mc_effort=mc_eff, mc_std_error=mc_se)
