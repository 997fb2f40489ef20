"""Euler-Maruyama simulation of reference and controlled diffusions.

The reference dynamics are

    dX_t = b(X_t, t) dt + sigma(X_t, t) dW_t,

and the controlled dynamics add a state-feedback drift through the diffusion
matrix a = sigma sigma^T:

    dX_t = (b + a u)(X_t, t) dt + sigma(X_t, t) dW_t.

Both simulators use left-endpoint coefficient evaluation and record every
noise increment, so change-of-measure weights are exact relative to the
realized discretization.  All coefficient callables are batched: they map
states of shape (n_paths, n) and a scalar time to per-path values.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import rng
from .errors import ControlEvaluationError, SimulationError, StabilityError, CapabilityError
from .grids import GaussianLaw, GridMeasure, TimeGrid

InitialLaw = Union[float, np.ndarray, GaussianLaw, GridMeasure, None]


@dataclass(frozen=True)
class DiffusionModel:
    """Coefficient bundle defining a diffusion on R^n driven by R^m noise.

    drift(x, t) -> (batch, n); diffusion(x, t) -> (batch, n, m) or a constant
    (n, m) matrix.  Optional Jacobians enable first-variation flows:
    drift_jacobian(x, t) -> (batch, n, n) and diffusion_jacobian(x, t) ->
    (batch, m, n, n), the Jacobian of each noise column stacked along axis 1.
    """

    state_dim: int
    noise_dim: int
    drift: Callable[[np.ndarray, float], np.ndarray]
    diffusion: Callable[[np.ndarray, float], np.ndarray]
    drift_jacobian: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    diffusion_jacobian: Optional[Callable[[np.ndarray, float], np.ndarray]] = None
    initial_law: InitialLaw = None
    uniformly_elliptic: bool = False
    ellipticity_constant: float = 0.0
    closed_form_transition: Optional[Callable[[np.ndarray, np.ndarray, float, float], np.ndarray]] = None
    name: str = ""

    def sigma(self, x: np.ndarray, t: float) -> np.ndarray:
        """Diffusion matrix broadcast to shape (batch, n, m)."""
        s = np.asarray(self.diffusion(x, t), dtype=float)
        if s.ndim == 2:
            s = np.broadcast_to(s, (x.shape[0],) + s.shape)
        return s

    def a(self, x: np.ndarray, t: float) -> np.ndarray:
        """a = sigma sigma^T, shape (batch, n, n)."""
        s = self.sigma(x, t)
        return np.einsum("pij,pkj->pik", s, s)

    def check_ellipticity(self, points: np.ndarray, times: np.ndarray) -> None:
        """Sampled check of z^T a z >= c |z|^2 on the given probe set."""
        if not self.uniformly_elliptic:
            raise CapabilityError("model is not flagged uniformly_elliptic")
        c = self.ellipticity_constant
        for t in np.atleast_1d(times):
            eigs = np.linalg.eigvalsh(self.a(np.atleast_2d(points), float(t)))
            if np.min(eigs) < c - 1e-12:
                raise CapabilityError(
                    f"ellipticity violated: min eigenvalue {np.min(eigs):.3e} < {c} at t={t}")


@dataclass(frozen=True)
class ControlField:
    """State-feedback control u(x, t) -> R^n, batched like model coefficients.

    Field-backed controls carry the diameter of their spatial domain; the
    per-step drift guard in simulate_controlled uses it as its length scale.
    """

    func: Callable[[np.ndarray, float], np.ndarray]
    domain_diameter: Optional[float] = None
    label: str = ""

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        return self.func(x, t)

    @staticmethod
    def zero(state_dim: int) -> "ControlField":
        return ControlField(lambda x, t: np.zeros((x.shape[0], state_dim)), label="zero")


@dataclass(frozen=True)
class Path:
    """One discrete path: states on the nodes, noise increments on the steps."""

    grid: TimeGrid
    states: np.ndarray            # (n_steps + 1, n)
    noise_increments: Optional[np.ndarray] = None  # (n_steps, m)

    def __post_init__(self):
        if self.states.shape[0] != self.grid.n_steps + 1:
            raise ValueError("states must have n_steps + 1 rows")
        if self.noise_increments is not None and \
                self.noise_increments.shape[0] != self.grid.n_steps:
            raise ValueError("noise_increments must have n_steps rows")

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass(frozen=True)
class PathEnsemble:
    """A batch of paths on one grid, with optional per-path log-weights."""

    grid: TimeGrid
    states: np.ndarray            # (n_paths, n_steps + 1, n)
    noise_increments: Optional[np.ndarray] = None  # (n_paths, n_steps, m)
    log_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.states.ndim != 3 or self.states.shape[1] != self.grid.n_steps + 1:
            raise ValueError("states must have shape (n_paths, n_steps + 1, n)")
        if self.log_weights is not None:
            lw = np.asarray(self.log_weights, dtype=float)
            if lw.shape != (self.states.shape[0],):
                raise ValueError("log_weights must be one value per path")
            if not np.all(np.isfinite(lw)):
                raise ValueError("log_weights must be finite")
            object.__setattr__(self, "log_weights", lw)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[2]

    @property
    def terminal(self) -> np.ndarray:
        return self.states[:, -1, :]

    def path(self, i: int) -> Path:
        inc = None if self.noise_increments is None else self.noise_increments[i]
        return Path(self.grid, self.states[i], inc)

    def weights(self) -> np.ndarray:
        """Normalized importance weights (uniform when no log-weights stored)."""
        if self.log_weights is None:
            return np.full(self.n_paths, 1.0 / self.n_paths)
        shifted = self.log_weights - np.max(self.log_weights)
        w = np.exp(shifted)
        return w / w.sum()

    def with_log_weights(self, log_weights: np.ndarray) -> "PathEnsemble":
        return PathEnsemble(self.grid, self.states, self.noise_increments, log_weights)


def _draw_initial(model: DiffusionModel, init: InitialLaw, n_paths: int, seed: int) -> np.ndarray:
    if init is None:
        init = model.initial_law
    if init is None:
        raise ValueError("no initial condition: pass init or set model.initial_law")
    n = model.state_dim
    if isinstance(init, GaussianLaw):
        x0 = init.sample(n_paths, rng.stream(seed, rng.INIT))
    elif isinstance(init, GridMeasure):
        if n != 1:
            raise ValueError("GridMeasure initial laws are one-dimensional")
        x0 = init.sample(n_paths, rng.stream(seed, rng.INIT))[:, None]
    else:
        z = np.atleast_1d(np.asarray(init, dtype=float))
        if z.shape != (n,):
            raise ValueError(f"initial point must have shape ({n},)")
        x0 = np.tile(z, (n_paths, 1))
    if x0.shape != (n_paths, n):
        raise ValueError("initial draw has wrong shape")
    return x0


def _check_finite(arr: np.ndarray, what: str, t: float) -> None:
    if not np.all(np.isfinite(arr)):
        bad = int(np.argwhere(~np.all(np.isfinite(arr.reshape(arr.shape[0], -1)), axis=1))[0, 0])
        raise SimulationError(f"non-finite {what} at t={t:.6g}, path index {bad}")


def _simulate(model: DiffusionModel, grid: TimeGrid, init: InitialLaw, n_paths: int,
              seed: int, control: Optional[ControlField],
              max_drift_step: Optional[float]) -> PathEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    n, m = model.state_dim, model.noise_dim
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    times = grid.times()

    cap = max_drift_step
    if cap is None and control is not None and control.domain_diameter is not None:
        cap = 10.0 * control.domain_diameter

    states = np.empty((n_paths, grid.n_steps + 1, n))
    noises = np.empty((n_paths, grid.n_steps, m))
    x = _draw_initial(model, init, n_paths, seed)
    states[:, 0, :] = x

    for k in range(grid.n_steps):
        t = float(times[k])
        b = np.asarray(model.drift(x, t), dtype=float)
        _check_finite(b, "drift", t)
        s = model.sigma(x, t)
        _check_finite(s, "diffusion", t)
        drift = b
        if control is not None:
            u = np.asarray(control(x, t), dtype=float)
            if not np.all(np.isfinite(u)):
                bad = int(np.argwhere(~np.all(np.isfinite(u), axis=1))[0, 0])
                raise ControlEvaluationError(
                    f"non-finite control value at t={t:.6g}, path index {bad}")
            au = np.einsum("pij,pkj,pk->pi", s, s, u)
            if cap is not None:
                worst = float(np.max(np.linalg.norm(au, axis=1))) * dt
                if worst > cap:
                    raise StabilityError(
                        f"controlled drift step {worst:.3e} exceeds cap {cap:.3e} "
                        f"at t={t:.6g}")
            drift = b + au
        dw = rng.step_normals(seed, k, n_paths, m) * sqrt_dt
        noises[:, k, :] = dw
        x = x + drift * dt + np.einsum("pij,pj->pi", s, dw)
        states[:, k + 1, :] = x

    return PathEnsemble(grid, states, noises)


def simulate_reference(model: DiffusionModel, grid: TimeGrid, init: InitialLaw = None,
                       n_paths: int = 1, seed: int = 0) -> PathEnsemble:
    """Euler-Maruyama ensemble of the reference diffusion."""
    return _simulate(model, grid, init, n_paths, seed, control=None, max_drift_step=None)


def simulate_controlled(model: DiffusionModel, control: ControlField, grid: TimeGrid,
                        init: InitialLaw = None, n_paths: int = 1, seed: int = 0,
                        max_drift_step: Optional[float] = None) -> PathEnsemble:
    """Euler-Maruyama ensemble with the added drift a(x,t) u(x,t)."""
    return _simulate(model, grid, init, n_paths, seed, control, max_drift_step)


def girsanov_log_weights(ensemble: PathEnsemble, model: DiffusionModel,
                         control: ControlField, increments: str = "reference") -> np.ndarray:
    """Per-path log of the change-of-measure density produced by ``control``.

    With increments="reference" the ensemble must come from simulate_reference
    under ``model``; the left-endpoint Ito discretization gives

        log Z = sum_k u^T sigma(X_k, t_k) dW_k - (1/2) sum_k |sigma^T u|^2 dt.

    With increments="controlled" the ensemble's stored increments are the
    driving noise of the controlled process; they are first mapped back to
    reference-measure increments (dW = dW~ + sigma^T u dt), which flips the
    sign of the quadratic term.
    """
    if ensemble.noise_increments is None:
        raise ValueError("ensemble carries no noise increments")
    if increments not in ("reference", "controlled"):
        raise ValueError("increments must be 'reference' or 'controlled'")
    dt = ensemble.grid.dt
    times = ensemble.grid.times()
    half = 0.5 if increments == "controlled" else -0.5
    out = np.zeros(ensemble.n_paths)
    for k in range(ensemble.grid.n_steps):
        t = float(times[k])
        x = ensemble.states[:, k, :]
        s = model.sigma(x, t)
        u = np.asarray(control(x, t), dtype=float)
        c = np.einsum("pij,pi->pj", s, u)        # sigma^T u
        dw = ensemble.noise_increments[:, k, :]
        out += np.sum(c * dw, axis=1) + half * np.sum(c * c, axis=1) * dt
    return out


def girsanov_log_weight(path: Path, model: DiffusionModel, control: ControlField,
                        increments: str = "reference") -> float:
    """Single-path version of girsanov_log_weights."""
    if path.noise_increments is None:
        raise ValueError("path carries no noise increments")
    ens = PathEnsemble(path.grid, path.states[None], path.noise_increments[None])
    return float(girsanov_log_weights(ens, model, control, increments)[0])


def _simulate_with_jacobian(model: DiffusionModel, grid: TimeGrid, z: np.ndarray,
                            n_paths: int, seed: int,
                            keep_history: bool = False):
    """Co-simulate state paths and first-variation matrices from a point start.

    The first-variation (Jacobian) flow solves

        dPsi = (db/dx) Psi dt + sum_i (dsigma_i/dx) Psi dW^i,  Psi_0 = I,

    driven by the same noise as the state path.  Returns the ensemble, the
    terminal Jacobians (n_paths, n, n), and optionally the whole Jacobian
    history (n_paths, n_steps + 1, n, n).
    """
    if model.drift_jacobian is None:
        raise CapabilityError("model provides no drift Jacobian")
    n, m = model.state_dim, model.noise_dim
    dt = grid.dt
    sqrt_dt = np.sqrt(dt)
    times = grid.times()

    states = np.empty((n_paths, grid.n_steps + 1, n))
    noises = np.empty((n_paths, grid.n_steps, m))
    x = _draw_initial(model, np.asarray(z, dtype=float), n_paths, seed)
    states[:, 0, :] = x
    psi = np.broadcast_to(np.eye(n), (n_paths, n, n)).copy()
    history = np.empty((n_paths, grid.n_steps + 1, n, n)) if keep_history else None
    if keep_history:
        history[:, 0] = psi

    for k in range(grid.n_steps):
        t = float(times[k])
        b = np.asarray(model.drift(x, t), dtype=float)
        _check_finite(b, "drift", t)
        s = model.sigma(x, t)
        jb = np.asarray(model.drift_jacobian(x, t), dtype=float)
        dw = rng.step_normals(seed, k, n_paths, m) * sqrt_dt
        noises[:, k, :] = dw
        dpsi = np.einsum("pij,pjk->pik", jb, psi) * dt
        if model.diffusion_jacobian is not None:
            js = np.asarray(model.diffusion_jacobian(x, t), dtype=float)
            dpsi = dpsi + np.einsum("pmij,pjk,pm->pik", js, psi, dw)
        psi = psi + dpsi
        x = x + b * dt + np.einsum("pij,pj->pi", s, dw)
        states[:, k + 1, :] = x
        if keep_history:
            history[:, k + 1] = psi

    ens = PathEnsemble(grid, states, noises)
    return ens, psi, history


def simulate_jacobian_flow(model: DiffusionModel, grid: TimeGrid, z,
                           seed: int = 0) -> tuple[Path, np.ndarray]:
    """One path plus its Jacobian flow Psi_k at every node."""
    ens, _, history = _simulate_with_jacobian(
        model, grid, np.atleast_1d(np.asarray(z, dtype=float)), 1, seed, keep_history=True)
    return ens.path(0), history[0]
