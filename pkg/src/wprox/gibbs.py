"""Reference measures, entropies, Fisher information, and the proximal Gibbs map.

The reference measure has density proportional to exp(-U) for a strongly
convex potential U.  The proximal Gibbs operator tilts it by the current
first variation of the energy:

    gibbs(mu) has weights proportional to exp(-flat(mu, x)/sigma - U(x)).

Its fixed point is the minimizer of F + sigma * KL(. | reference), and the
strong convexity of U combined with the sup bound on the first variation
yields an explicit log-Sobolev constant and Talagrand factor for every
tilted measure.

Divergences are extended-real: absolute-continuity failures return the
float infinity sentinel, against which all comparisons are well defined.
Exponentials of potentials are always max-shifted before normalization;
padded domains make raw exponentials underflow.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .functionals import FunctionalSpec
from .measures import DiscreteMeasure, GridSpec, PointMap

__all__ = [
    "PotentialSpec",
    "GibbsConstants",
    "reference_measure",
    "kl",
    "entropy_h",
    "relative_fisher",
    "proximal_gibbs",
    "lsi_constant",
    "grad_log_ratio",
]

# Mass cutoff below which nodes are dropped from Fisher-information sums.
FISHER_MASS_CUTOFF = 1e-300


@dataclass(frozen=True)
class PotentialSpec:
    """A strongly convex confinement potential U with its gradient.

    ``strong_convexity`` is the modulus alpha > 0 in
    (x - y) . (grad U(x) - grad U(y)) >= alpha |x - y|^2.
    """

    potential: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    strong_convexity: float

    def __post_init__(self):
        if self.strong_convexity <= 0:
            raise ValueError(
                f"strong convexity modulus must be positive, got {self.strong_convexity}"
            )

    def validate_on(self, grid: GridSpec, rng: np.random.Generator | None = None, pairs: int = 64) -> None:
        """Spot-check strong convexity and lower-boundedness on grid samples."""
        rng = rng or np.random.default_rng(0)
        nodes = grid.nodes()
        vals = np.asarray(self.potential(nodes), dtype=float)
        if not np.all(np.isfinite(vals)):
            raise ValueError("potential is not finite on the grid")
        ii = rng.integers(0, len(nodes), size=pairs)
        jj = rng.integers(0, len(nodes), size=pairs)
        keep = ii != jj
        x, y = nodes[ii[keep]], nodes[jj[keep]]
        gx = np.atleast_2d(np.asarray(self.gradient(x), dtype=float))
        gy = np.atleast_2d(np.asarray(self.gradient(y), dtype=float))
        lhs = np.sum((x - y) * (gx - gy), axis=1)
        gap = np.sum((x - y) ** 2, axis=1)
        worst = float(np.min(lhs - self.strong_convexity * gap))
        if worst < -1e-9:
            raise ValueError(
                f"strong convexity modulus {self.strong_convexity} violated by {-worst:.3e}"
            )


def quadratic_potential(alpha: float = 1.0) -> PotentialSpec:
    """U(x) = alpha |x|^2 / 2, the standard Gaussian-type confinement."""
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return PotentialSpec(
        potential=lambda x: 0.5 * alpha * np.sum(np.atleast_2d(x) ** 2, axis=1),
        gradient=lambda x: alpha * np.atleast_2d(x),
        strong_convexity=alpha,
    )


@dataclass(frozen=True)
class GibbsConstants:
    lsi: float
    talagrand_factor: float

    def __post_init__(self):
        if not (self.lsi > 0 and self.talagrand_factor > 0):
            raise ValueError("constants must be positive")


def _gibbs_weights(log_density: np.ndarray) -> np.ndarray:
    shifted = log_density - np.max(log_density)
    w = np.exp(shifted)
    return w / w.sum()


def reference_measure(U: PotentialSpec, grid: GridSpec) -> DiscreteMeasure:
    """Normalized weights proportional to exp(-U) at the grid nodes."""
    vals = np.asarray(U.potential(grid.nodes()), dtype=float).reshape(grid.num_nodes)
    if not np.all(np.isfinite(vals)):
        raise ValueError("potential is not finite on the grid")
    return DiscreteMeasure(grid, _gibbs_weights(-vals))


def kl(mu: DiscreteMeasure, rho: DiscreteMeasure) -> float:
    """Relative entropy of mu with respect to rho on a shared grid.

    Returns +inf when mu puts mass where rho has none; 0 log 0 = 0.
    """
    if mu.grid != rho.grid:
        raise ValueError("measures live on different grids")
    wm = mu.weights
    wr = rho.weights
    pos = wm > 0.0
    if np.any(wr[pos] <= 0.0):
        return math.inf
    return float(np.sum(wm[pos] * np.log(wm[pos] / wr[pos])))


def entropy_h(mu: DiscreteMeasure) -> float:
    """Entropy relative to Lebesgue: sum of w log(w / cell_volume), 0 log 0 = 0."""
    w = mu.weights
    pos = w > 0.0
    return float(np.sum(w[pos] * np.log(w[pos] / mu.grid.cell_volume)))


def _log_ratio_gradient(mu: DiscreteMeasure, rho: DiscreteMeasure) -> np.ndarray:
    """Finite-difference gradient field of log(mu/rho), shape (num_nodes, d).

    Central differences on interior nodes, second-order one-sided at the
    boundary.  Weights are clipped at the Fisher mass cutoff inside the
    logs so the stencil stays finite near empty nodes; those nodes carry
    no mass in any downstream sum.
    """
    if mu.grid != rho.grid:
        raise ValueError("measures live on different grids")
    grid = mu.grid
    logr = np.log(np.maximum(mu.weights, FISHER_MASS_CUTOFF)) - np.log(
        np.maximum(rho.weights, FISHER_MASS_CUTOFF)
    )
    if grid.dimension == 1:
        (h,) = grid.spacings
        return np.gradient(logr, h)[:, None]
    hx, hy = grid.spacings
    field = logr.reshape(grid.shape)
    gx, gy = np.gradient(field, hx, hy)
    return np.column_stack([gx.ravel(), gy.ravel()])


def relative_fisher(mu: DiscreteMeasure, rho: DiscreteMeasure) -> float:
    """Relative Fisher information: mass-weighted squared log-ratio gradient.

    Returns +inf on absolute-continuity failure.  Nodes with mass below
    ``FISHER_MASS_CUTOFF`` are excluded from the sum.
    """
    pos = mu.weights > 0.0
    if np.any(rho.weights[pos] <= 0.0):
        return math.inf
    grad = _log_ratio_gradient(mu, rho)
    include = mu.weights >= FISHER_MASS_CUTOFF
    sq = np.sum(grad * grad, axis=1)
    return float(np.sum(mu.weights[include] * sq[include]))


def grad_log_ratio(mu: DiscreteMeasure, rho: DiscreteMeasure) -> PointMap:
    """The gradient field of log(mu/rho) as a map over the grid nodes."""
    pos = mu.weights > 0.0
    if np.any(rho.weights[pos] <= 0.0):
        raise ValueError("mu is not absolutely continuous with respect to rho")
    return PointMap(_log_ratio_gradient(mu, rho))


def proximal_gibbs(
    F: FunctionalSpec, mu: DiscreteMeasure, sigma: float, U: PotentialSpec
) -> DiscreteMeasure:
    """The tilted reference measure exp(-flat(mu, .)/sigma - U), normalized.

    With F = 0 this is exactly the reference measure; its fixed point in mu
    is the minimizer of F + sigma * KL(. | reference).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    nodes = mu.grid.nodes()
    tilt = np.asarray(F.flat_derivative(mu, nodes), dtype=float).reshape(mu.grid.num_nodes)
    u_vals = np.asarray(U.potential(nodes), dtype=float).reshape(mu.grid.num_nodes)
    return DiscreteMeasure(mu.grid, _gibbs_weights(-tilt / sigma - u_vals))


def lsi_constant(alpha_u: float, flat_bound: float, sigma: float) -> GibbsConstants:
    """Log-Sobolev constant and Talagrand factor of the tilted measures.

    A bounded tilt of size C relative to sigma degrades the log-Sobolev
    constant of the reference by exp(-4C/sigma) (Holley--Stroock), giving

        lsi = alpha_u * exp(-4C/sigma),
        talagrand_factor = 2 * exp(4C/sigma) / alpha_u.
    """
    if alpha_u <= 0 or sigma <= 0:
        raise ValueError("alpha_u and sigma must be positive")
    if flat_bound < 0:
        raise ValueError(f"flat_bound must be >= 0, got {flat_bound}")
    damp = math.exp(-4.0 * flat_bound / sigma)
    return GibbsConstants(lsi=alpha_u * damp, talagrand_factor=2.0 / (alpha_u * damp))
