"""Free energy on finite spaces and the exponential-tilt minimizer.

This module is the ground truth for every variational identity used by the
path-space machinery: the free energy

    F(q) = <H, q> + D(q || p)

is minimized uniquely by the tilted measure p* with p*_i proportional to
p_i exp(-H_i), and the minimum equals -log sum_i p_i exp(-H_i).  Everything
here is exact finite arithmetic (up to floating point), so the path modules
can be validated against it at matching discretizations.

Conventions: 0 log 0 = 0, and mass on infinite energy contributes
+inf * exp(-inf) = 0 to partition sums.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateEnergyError

_GAP_SLACK = 1e-12


def _as_masses(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError(f"{name} must be a 1-d mass vector")
    if np.any(p < 0):
        raise ValueError(f"{name} has negative mass")
    if not np.isclose(p.sum(), 1.0, rtol=0, atol=1e-9):
        raise ValueError(f"{name} must sum to 1, got {p.sum()}")
    return p


@dataclass(frozen=True)
class FiniteSpace:
    """Finite reference space: labelled points, reference masses, energies."""

    points: tuple
    reference: np.ndarray
    energy: np.ndarray

    def __post_init__(self):
        reference = _as_masses(self.reference, "reference")
        energy = np.asarray(self.energy, dtype=float)
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "reference", reference)
        object.__setattr__(self, "energy", energy)
        if energy.shape != reference.shape or len(self.points) != len(reference):
            raise ValueError("points, reference, and energy must be congruent")
        if np.any(np.isnan(energy)) or np.any(energy == -np.inf):
            raise ValueError("energies must lie in (-inf, +inf]")
        if not np.any((reference > 0) & np.isfinite(energy)):
            raise DegenerateEnergyError("no reference mass on finite energy")

    @property
    def size(self) -> int:
        return len(self.points)

    def to_json_dict(self) -> dict:
        return {"points": list(self.points),
                "reference": self.reference.tolist(),
                "energy": self.energy.tolist()}

    @staticmethod
    def from_json_dict(doc: dict) -> "FiniteSpace":
        return FiniteSpace(tuple(doc["points"]),
                           np.asarray(doc["reference"], dtype=float),
                           np.asarray(doc["energy"], dtype=float))


@dataclass(frozen=True)
class FreeEnergyReport:
    """Free-energy audit of one candidate measure against a FiniteSpace."""

    average_energy: float
    relative_entropy: float
    free_energy: float
    equilibrium: float
    gap: float

    def __post_init__(self):
        if np.isfinite(self.free_energy):
            assert abs(self.free_energy - (self.average_energy + self.relative_entropy)) < 1e-9
        if np.isfinite(self.gap):
            assert self.gap >= -_GAP_SLACK

    def to_json_dict(self) -> dict:
        return {"average_energy": self.average_energy,
                "relative_entropy": self.relative_entropy,
                "free_energy": self.free_energy,
                "equilibrium": self.equilibrium,
                "gap": self.gap}


def relative_entropy(p_tilde, p) -> float:
    """D(p_tilde || p) = sum p_tilde log(p_tilde / p); +inf off support."""
    p_tilde = _as_masses(p_tilde, "p_tilde")
    p = _as_masses(p, "p")
    if p_tilde.shape != p.shape:
        raise ValueError("mass vectors must have equal length")
    active = p_tilde > 0
    if np.any(active & (p == 0)):
        return np.inf
    q, r = p_tilde[active], p[active]
    return float(np.sum(q * (np.log(q) - np.log(r))))


def _log_partition(space: FiniteSpace) -> float:
    """log sum_i p_i exp(-H_i) via a max-shifted sum."""
    with np.errstate(divide="ignore"):
        terms = np.where(space.reference > 0,
                         np.log(np.where(space.reference > 0, space.reference, 1.0))
                         - space.energy, -np.inf)
    return float(logsumexp(terms))


def equilibrium_free_energy(space: FiniteSpace) -> float:
    """-log sum_i p_i exp(-H_i), the minimum attainable free energy."""
    lz = _log_partition(space)
    if lz == -np.inf:
        raise DegenerateEnergyError("all reference mass sits on infinite energy")
    return -lz


def gibbs_minimizer(space: FiniteSpace) -> np.ndarray:
    """Masses of the tilted measure p*_i proportional to p_i exp(-H_i)."""
    lz = _log_partition(space)
    if lz == -np.inf:
        raise DegenerateEnergyError("all reference mass sits on infinite energy")
    with np.errstate(divide="ignore"):
        logp = np.where(space.reference > 0,
                        np.log(np.where(space.reference > 0, space.reference, 1.0))
                        - space.energy - lz, -np.inf)
    out = np.exp(logp)
    return out / out.sum()


def free_energy(p_tilde, space: FiniteSpace) -> float:
    """<H, p_tilde> + D(p_tilde || p); +inf when either term is."""
    p_tilde = _as_masses(p_tilde, "p_tilde")
    d = relative_entropy(p_tilde, space.reference)
    if d == np.inf:
        return np.inf
    active = p_tilde > 0
    if np.any(active & ~np.isfinite(space.energy)):
        return np.inf
    return float(np.sum(p_tilde[active] * space.energy[active])) + d


def free_energy_report(p_tilde, space: FiniteSpace) -> FreeEnergyReport:
    p_tilde = _as_masses(p_tilde, "p_tilde")
    d = relative_entropy(p_tilde, space.reference)
    active = p_tilde > 0
    if d == np.inf or np.any(active & ~np.isfinite(space.energy)):
        avg = np.inf
    else:
        avg = float(np.sum(p_tilde[active] * space.energy[active]))
    f = avg + d if np.isfinite(avg) and np.isfinite(d) else np.inf
    eq = equilibrium_free_energy(space)
    return FreeEnergyReport(average_energy=avg, relative_entropy=d,
                            free_energy=f, equilibrium=eq, gap=f - eq)


@dataclass(frozen=True)
class Decomposition:
    """Two-stage split of a product-space free energy.

    The joint free energy equals the marginal divergence plus the mixture of
    conditional free energies; minimizing the first-coordinate marginal
    freely drives the total down to the joint equilibrium, attained by the
    tilt of the marginal by exp(-v).
    """

    marginal_divergence: float
    conditional_free_energies: np.ndarray   # F(x0, q^{x0}) per first coordinate
    conditional_values: np.ndarray          # v(x0) = -log sum_j exp(-H(x0, .)) dP^{x0}
    recombined_free_energy: float
    joint_free_energy: float
    joint_equilibrium: float
    optimal_marginal: np.ndarray            # masses of the exp(-v) tilt of mu
    optimal_marginal_value: float           # <v, mu*> + D(mu* || mu)


def decompose_free_energy(joint_tilde, joint_reference, energy) -> Decomposition:
    """Split F on a product of two finite spaces along the first coordinate."""
    q = np.asarray(joint_tilde, dtype=float)
    p = np.asarray(joint_reference, dtype=float)
    h = np.asarray(energy, dtype=float)
    if q.ndim != 2 or q.shape != p.shape or q.shape != h.shape:
        raise ValueError("decomposition requires congruent 2-d product-space arrays")

    flat_space = FiniteSpace(tuple(range(q.size)), p.ravel(), h.ravel())
    joint_f = free_energy(q.ravel(), flat_space)
    joint_eq = equilibrium_free_energy(flat_space)

    mu_tilde = q.sum(axis=1)
    mu = p.sum(axis=1)
    d_marginal = relative_entropy(mu_tilde, mu)

    n0 = q.shape[0]
    cond_f = np.zeros(n0)
    values = np.full(n0, np.inf)
    for i in range(n0):
        if mu[i] > 0:
            cond_ref = p[i] / mu[i]
            with np.errstate(divide="ignore"):
                terms = np.where(cond_ref > 0,
                                 np.log(np.where(cond_ref > 0, cond_ref, 1.0)) - h[i],
                                 -np.inf)
            values[i] = -float(logsumexp(terms))
        if mu_tilde[i] > 0:
            if mu[i] == 0:
                cond_f[i] = np.inf
                continue
            cond_space = FiniteSpace(tuple(range(q.shape[1])), p[i] / mu[i], h[i])
            cond_f[i] = free_energy(q[i] / mu_tilde[i], cond_space)

    active = mu_tilde > 0
    if d_marginal == np.inf or np.any(active & ~np.isfinite(cond_f)):
        recombined = np.inf
    else:
        recombined = d_marginal + float(np.sum(mu_tilde[active] * cond_f[active]))

    # unconstrained marginal optimum: tilt mu by exp(-v)
    with np.errstate(divide="ignore"):
        log_mu_star = np.where(mu > 0,
                               np.log(np.where(mu > 0, mu, 1.0)) - values, -np.inf)
    log_norm = logsumexp(log_mu_star)
    mu_star = np.exp(log_mu_star - log_norm)
    mu_star = mu_star / mu_star.sum()
    star_active = mu_star > 0
    star_value = (float(np.sum(mu_star[star_active] * values[star_active]))
                  + relative_entropy(mu_star, mu))

    return Decomposition(marginal_divergence=d_marginal,
                         conditional_free_energies=cond_f,
                         conditional_values=values,
                         recombined_free_energy=recombined,
                         joint_free_energy=joint_f,
                         joint_equilibrium=joint_eq,
                         optimal_marginal=mu_star,
                         optimal_marginal_value=star_value)
