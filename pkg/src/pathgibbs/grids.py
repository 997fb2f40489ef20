"""Time grids, space-time scalar fields, and grid-supported measures.

These carriers are deliberately dumb: uniform-in-time grids, rectangular
spatial grids with strictly increasing axes, multilinear interpolation in
space, linear interpolation in time, and clamping to the nearest boundary
point outside the grid.  Clamping is the library-wide extension policy for
field-backed quantities; it trades extrapolation blow-up for a documented
bias at the domain edge.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of [t_start, t_end] into n_steps steps."""

    t_start: float
    t_end: float
    n_steps: int

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise ValueError("t_end must exceed t_start")
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_steps

    def times(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_steps + 1)

    def restrict(self, s: float) -> "TimeGrid":
        """Sub-grid on [s, t_end] with approximately the same step size."""
        if not self.t_start <= s < self.t_end:
            raise ValueError("restriction point must lie in [t_start, t_end)")
        if s == self.t_start:
            return self
        n = max(1, round(self.n_steps * (self.t_end - s) / (self.t_end - self.t_start)))
        return TimeGrid(s, self.t_end, n)


@dataclass(frozen=True)
class FieldGrid:
    """Rectangular space-time grid: spatial axes plus uniform time nodes."""

    axes: tuple[np.ndarray, ...]
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axes", tuple(np.asarray(a, dtype=float) for a in self.axes))
        object.__setattr__(self, "times", np.asarray(self.times, dtype=float))
        for a in self.axes:
            if a.ndim != 1 or len(a) < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("spatial axes must be strictly increasing 1-d arrays")
        if self.times.ndim != 1 or len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("time nodes must be strictly increasing")

    @staticmethod
    def uniform(bounds: Sequence[tuple[float, float]], n_nodes: Sequence[int],
                t_start: float, t_end: float, n_steps: int) -> "FieldGrid":
        axes = tuple(np.linspace(lo, hi, k) for (lo, hi), k in zip(bounds, n_nodes))
        times = np.linspace(t_start, t_end, n_steps + 1)
        return FieldGrid(axes, times)

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(a) for a in self.axes)

    def time_grid(self) -> TimeGrid:
        return TimeGrid(float(self.times[0]), float(self.times[-1]), len(self.times) - 1)

    def spacings(self) -> tuple[float, ...]:
        out = []
        for a in self.axes:
            d = np.diff(a)
            if not np.allclose(d, d[0], rtol=1e-9, atol=0.0):
                raise ValueError("grid solvers require uniformly spaced axes")
            out.append(float(d[0]))
        return tuple(out)

    def meshgrid(self) -> list[np.ndarray]:
        return np.meshgrid(*self.axes, indexing="ij")

    def points(self) -> np.ndarray:
        """All grid nodes flattened to shape (prod(shape), ndim)."""
        mesh = self.meshgrid()
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _locate(axis: np.ndarray, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Clamped cell index and fractional offset for query points q."""
    q = np.clip(q, axis[0], axis[-1])
    idx = np.searchsorted(axis, q, side="right") - 1
    idx = np.clip(idx, 0, len(axis) - 2)
    frac = (q - axis[idx]) / (axis[idx + 1] - axis[idx])
    return idx, frac


@dataclass(frozen=True)
class ScalarField:
    """Scalar values on a FieldGrid with clamped space-time interpolation."""

    grid: FieldGrid
    values: np.ndarray  # shape (n_times, *grid.shape)

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=float))
        expected = (len(self.grid.times),) + self.grid.shape
        if self.values.shape != expected:
            raise ValueError(f"values shape {self.values.shape} != {expected}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar fields must be finite everywhere")

    def _interp_space(self, slice_values: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.grid.ndim == 1:
            i, f = _locate(self.grid.axes[0], x[:, 0])
            return slice_values[i] * (1.0 - f) + slice_values[i + 1] * f
        if self.grid.ndim == 2:
            i, fx = _locate(self.grid.axes[0], x[:, 0])
            j, fy = _locate(self.grid.axes[1], x[:, 1])
            v00 = slice_values[i, j]
            v10 = slice_values[i + 1, j]
            v01 = slice_values[i, j + 1]
            v11 = slice_values[i + 1, j + 1]
            return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
                    + v01 * (1 - fx) * fy + v11 * fx * fy)
        raise NotImplementedError("interpolation implemented for 1- and 2-d grids")

    def eval(self, x: np.ndarray, t: float) -> np.ndarray:
        """Interpolate at spatial points x (batch, ndim) and scalar time t."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        times = self.grid.times
        t = min(max(float(t), times[0]), times[-1])
        k = min(int(np.searchsorted(times, t, side="right")) - 1, len(times) - 2)
        k = max(k, 0)
        w = (t - times[k]) / (times[k + 1] - times[k])
        lo = self._interp_space(self.values[k], x)
        if w == 0.0:
            return lo
        hi = self._interp_space(self.values[k + 1], x)
        return lo * (1.0 - w) + hi * w

    def time_slice(self, k: int) -> np.ndarray:
        return self.values[k]

    def gradient_values(self) -> tuple[np.ndarray, ...]:
        """Central-difference spatial gradient arrays (one per axis)."""
        spacings = self.grid.spacings()
        return tuple(np.gradient(self.values, h, axis=1 + d)
                     for d, h in enumerate(spacings))

    def restricted(self, bounds: Sequence[tuple[float, float]]) -> "ScalarField":
        """Restrict to the sub-grid of nodes inside the given per-axis bounds."""
        slices = [slice(None)]
        axes = []
        for a, (lo, hi) in zip(self.grid.axes, bounds):
            mask = (a >= lo) & (a <= hi)
            first, last = np.argmax(mask), len(a) - 1 - np.argmax(mask[::-1])
            slices.append(slice(first, last + 1))
            axes.append(a[first:last + 1])
        sub = FieldGrid(tuple(axes), self.grid.times)
        return ScalarField(sub, self.values[tuple(slices)])


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Quadrature weights of the trapezoid rule on (possibly nonuniform) nodes."""
    nodes = np.asarray(nodes, dtype=float)
    if len(nodes) == 1:
        return np.ones(1)
    w = np.empty_like(nodes)
    w[0] = (nodes[1] - nodes[0]) / 2
    w[-1] = (nodes[-1] - nodes[-2]) / 2
    w[1:-1] = (nodes[2:] - nodes[:-2]) / 2
    return w


@dataclass(frozen=True)
class GridMeasure:
    """Nonnegative mass on a 1-d grid: density values plus quadrature weights.

    ``kind`` is "probability" (quadrature mass 1 within 1e-10) or
    "sigma_finite" (any nonnegative mass, possibly unnormalized).
    """

    nodes: np.ndarray
    density: np.ndarray
    weights: np.ndarray = None
    kind: str = "probability"

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        density = np.asarray(self.density, dtype=float)
        weights = self.weights
        if weights is None:
            weights = trapezoid_weights(nodes)
        weights = np.asarray(weights, dtype=float)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "density", density)
        object.__setattr__(self, "weights", weights)
        if nodes.ndim != 1 or density.shape != nodes.shape or weights.shape != nodes.shape:
            raise ValueError("nodes, density, and weights must be 1-d and congruent")
        if len(nodes) > 1 and np.any(np.diff(nodes) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if np.any(density < 0):
            raise ValueError("density values must be nonnegative")
        if self.kind not in ("probability", "sigma_finite"):
            raise ValueError(f"unknown measure kind: {self.kind}")
        if self.kind == "probability" and abs(self.total_mass() - 1.0) > 1e-10:
            raise ValueError(f"probability measure has quadrature mass {self.total_mass()}")

    @property
    def masses(self) -> np.ndarray:
        return self.density * self.weights

    def total_mass(self) -> float:
        return float(np.sum(self.density * self.weights))

    @staticmethod
    def dirac(z: float) -> "GridMeasure":
        return GridMeasure(np.array([float(z)]), np.array([1.0]), np.array([1.0]))

    @staticmethod
    def from_density(nodes: np.ndarray, density: np.ndarray,
                     kind: str = "probability", normalize: bool = False) -> "GridMeasure":
        nodes = np.asarray(nodes, dtype=float)
        density = np.asarray(density, dtype=float)
        w = trapezoid_weights(nodes)
        if normalize:
            density = density / np.sum(density * w)
        return GridMeasure(nodes, density, w, kind)

    @staticmethod
    def gaussian(nodes: np.ndarray, mean: float, var: float) -> "GridMeasure":
        nodes = np.asarray(nodes, dtype=float)
        density = np.exp(-((nodes - mean) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
        return GridMeasure.from_density(nodes, density, normalize=True)

    def is_dirac(self) -> bool:
        return len(self.nodes) == 1

    def sample(self, n: int, gen: np.random.Generator, jitter: bool = True) -> np.ndarray:
        """Inverse-CDF draws; within-cell uniform jitter smooths grid atoms."""
        if self.is_dirac():
            return np.full(n, self.nodes[0])
        masses = self.masses
        total = masses.sum()
        if total <= 0:
            raise ValueError("cannot sample from a zero measure")
        cdf = np.cumsum(masses) / total
        u = gen.random(n)
        idx = np.searchsorted(cdf, u, side="left")
        x = self.nodes[idx]
        if jitter:
            cell = np.empty_like(self.nodes)
            cell[:-1] = np.diff(self.nodes)
            cell[-1] = cell[-2]
            x = x + (gen.random(n) - 0.5) * cell[np.minimum(idx, len(cell) - 1)]
            x = np.clip(x, self.nodes[0], self.nodes[-1])
        return x


@dataclass(frozen=True)
class GaussianLaw:
    """Multivariate normal initial law."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        if cov.shape != (len(mean), len(mean)):
            raise ValueError("covariance shape must match mean dimension")

    def sample(self, n: int, gen: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + gen.standard_normal((n, len(self.mean))) @ chol.T

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        d = len(self.mean)
        diff = x - self.mean
        sol = np.linalg.solve(self.cov, diff.T).T
        quad = np.sum(diff * sol, axis=1)
        _, logdet = np.linalg.slogdet(self.cov)
        return -0.5 * (quad + d * np.log(2 * np.pi) + logdet)
