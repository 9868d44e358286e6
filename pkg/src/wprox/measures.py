"""Discrete probability measures on fixed rectangular grids.

Every solver in this package keeps its iterates on one shared grid, so
measures are plain weight vectors over the grid nodes.  Densities relative
to a reference measure are then node-wise weight ratios, which keeps
KL divergences and Fisher information well defined at every step.

Pushforwards redistribute atom masses to neighbouring nodes with linear
(1D) or bilinear (2D) splitting; targets outside the domain are clamped to
the boundary and counted, never silently dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GridSpec",
    "DiscreteMeasure",
    "PointMap",
    "PushforwardResult",
    "measure_from_density",
    "measure_from_weights",
    "mix",
    "second_moment",
    "pushforward",
    "measure_to_csv",
    "measure_from_csv",
]

# Mass-conservation tolerance for the probability simplex.
MASS_TOL = 1e-12

# Relative snap tolerance for pushforward targets that land (up to float
# noise) exactly on a grid node; keeps the identity map bitwise exact.
_SNAP_TOL = 1e-12


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor-product grid on a box in R^d, d in {1, 2}.

    Parameters
    ----------
    dimension : int
        1 or 2.
    lower, upper : tuple of float
        Box bounds per axis, ``lower[k] < upper[k]``.
    shape : tuple of int
        Nodes per axis, each >= 2.
    """

    dimension: int
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    shape: tuple[int, ...]

    def __post_init__(self):
        if self.dimension not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {self.dimension}")
        for name in ("lower", "upper", "shape"):
            if len(getattr(self, name)) != self.dimension:
                raise ValueError(f"{name} must have {self.dimension} entries")
        for lo, hi in zip(self.lower, self.upper):
            if not lo < hi:
                raise ValueError(f"need lower < upper per axis, got [{lo}, {hi}]")
        for n in self.shape:
            if n < 2:
                raise ValueError(f"need >= 2 nodes per axis, got {n}")

    @property
    def spacings(self) -> tuple[float, ...]:
        return tuple(
            (hi - lo) / (n - 1) for lo, hi, n in zip(self.lower, self.upper, self.shape)
        )

    @property
    def cell_volume(self) -> float:
        vol = 1.0
        for h in self.spacings:
            vol *= h
        return vol

    @property
    def num_nodes(self) -> int:
        n = 1
        for m in self.shape:
            n *= m
        return n

    def axes(self) -> tuple[np.ndarray, ...]:
        """Node coordinates along each axis."""
        return tuple(
            np.linspace(lo, hi, n)
            for lo, hi, n in zip(self.lower, self.upper, self.shape)
        )

    def nodes(self) -> np.ndarray:
        """All node coordinates, shape (num_nodes, dimension), C order."""
        axs = self.axes()
        if self.dimension == 1:
            return axs[0][:, None]
        xx, yy = np.meshgrid(axs[0], axs[1], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def nodes_1d(self) -> np.ndarray:
        """Flat coordinate array for 1D grids."""
        if self.dimension != 1:
            raise ValueError("nodes_1d requires a 1D grid")
        return self.axes()[0]


def grid_1d(lower: float, upper: float, nodes: int) -> GridSpec:
    return GridSpec(1, (lower,), (upper,), (nodes,))


def grid_2d(lower: Sequence[float], upper: Sequence[float], shape: Sequence[int]) -> GridSpec:
    return GridSpec(2, tuple(lower), tuple(upper), tuple(shape))


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability weights on the nodes of a grid.

    Weights are nonnegative, sum to one within ``MASS_TOL``, and are frozen
    after construction.  The density at node i relative to Lebesgue is
    ``weights[i] / grid.cell_volume``.
    """

    grid: GridSpec
    weights: np.ndarray = field(repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.grid.num_nodes,):
            raise ValueError(
                f"weights shape {w.shape} does not match grid with "
                f"{self.grid.num_nodes} nodes"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError(f"negative weight: min = {w.min():.3e}")
        total = w.sum()
        if abs(total - 1.0) > MASS_TOL:
            raise ValueError(f"weights sum to {total!r}, expected 1 within {MASS_TOL}")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def support(self) -> np.ndarray:
        """Indices of nodes carrying positive mass."""
        return np.nonzero(self.weights > 0.0)[0]

    def densities(self) -> np.ndarray:
        return self.weights / self.grid.cell_volume

    def mean(self) -> np.ndarray:
        return self.weights @ self.grid.nodes()


@dataclass(frozen=True)
class PointMap:
    """A target point per grid node, i.e. a map evaluated at the nodes."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("values must be (num_nodes, d)")
        if not np.all(np.isfinite(v)):
            raise ValueError("map values must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PushforwardResult:
    measure: DiscreteMeasure
    clamped_atoms: int
    clamped_mass: float


def measure_from_weights(grid: GridSpec, weights: np.ndarray, normalize: bool = True) -> DiscreteMeasure:
    """Build a measure from raw nonnegative weights, normalizing by default."""
    w = np.asarray(weights, dtype=float)
    if normalize:
        total = w.sum()
        if not total > 0:
            raise ValueError("weights sum to zero; cannot normalize")
        w = w / total
    return DiscreteMeasure(grid, w)


def measure_from_density(f: Callable[[np.ndarray], np.ndarray], grid: GridSpec) -> DiscreteMeasure:
    """Discretize a pointwise density: weights proportional to f at the nodes.

    ``f`` receives an (n, d) array of node coordinates and must return the
    n nonnegative density values.  Rejects densities that vanish at every
    node or are negative anywhere.
    """
    vals = np.asarray(f(grid.nodes()), dtype=float).reshape(grid.num_nodes)
    if np.any(vals < 0):
        raise ValueError("density is negative at some grid node")
    total = vals.sum()
    if not total > 0:
        raise ValueError("density vanishes at every grid node")
    return DiscreteMeasure(grid, vals / total)


def mix(a: DiscreteMeasure, b: DiscreteMeasure, beta: float) -> DiscreteMeasure:
    """Convex combination (1 - beta) * a + beta * b on a shared grid."""
    if a.grid != b.grid:
        raise ValueError("measures live on different grids")
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    w = (1.0 - beta) * a.weights + beta * b.weights
    return DiscreteMeasure(a.grid, w / w.sum())


def second_moment(mu: DiscreteMeasure) -> float:
    """E_mu |x|^2 over the grid nodes."""
    x = mu.grid.nodes()
    return float(mu.weights @ np.sum(x * x, axis=1))


def _split_axis(pos: np.ndarray, lo: float, h: float, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-axis linear splitting: node index, fraction toward index+1, clamp flag."""
    t = (pos - lo) / h
    clamped = (t < 0.0) | (t > n - 1)
    t = np.clip(t, 0.0, float(n - 1))
    nearest = np.rint(t)
    snap = np.abs(t - nearest) <= _SNAP_TOL * max(1.0, n - 1)
    t = np.where(snap, nearest, t)
    i0 = np.floor(t).astype(np.intp)
    i0 = np.minimum(i0, n - 2)
    frac = t - i0
    return i0, frac, clamped


def pushforward(mu: DiscreteMeasure, T: PointMap) -> PushforwardResult:
    """Image measure of ``mu`` under the nodewise map ``T``.

    Each atom's mass is split linearly (1D) or bilinearly (2D) between the
    nodes surrounding its target.  Targets outside the grid are clamped to
    the boundary; the number of clamped atoms and the mass they carry are
    reported in the result.  Total mass is preserved exactly, and in 1D
    interior targets preserve the first moment of the map exactly.
    """
    grid = mu.grid
    vals = T.values
    if vals.shape != (grid.num_nodes, grid.dimension):
        raise ValueError(
            f"map has shape {vals.shape}, expected ({grid.num_nodes}, {grid.dimension})"
        )
    w = mu.weights
    out = np.zeros(grid.num_nodes)

    if grid.dimension == 1:
        (h,) = grid.spacings
        (n,) = grid.shape
        i0, frac, clamped = _split_axis(vals[:, 0], grid.lower[0], h, n)
        np.add.at(out, i0, w * (1.0 - frac))
        np.add.at(out, i0 + 1, w * frac)
    else:
        hx, hy = grid.spacings
        nx, ny = grid.shape
        ix, fx, cx = _split_axis(vals[:, 0], grid.lower[0], hx, nx)
        iy, fy, cy = _split_axis(vals[:, 1], grid.lower[1], hy, ny)
        clamped = cx | cy
        # C-order flat index: node (i, j) -> i * ny + j
        base = ix * ny + iy
        np.add.at(out, base, w * (1.0 - fx) * (1.0 - fy))
        np.add.at(out, base + 1, w * (1.0 - fx) * fy)
        np.add.at(out, base + ny, w * fx * (1.0 - fy))
        np.add.at(out, base + ny + 1, w * fx * fy)

    clamped = clamped & (w > 0)
    total = out.sum()
    if abs(total - 1.0) > MASS_TOL:
        out = out / total
    result = DiscreteMeasure(grid, out)
    return PushforwardResult(result, int(np.count_nonzero(clamped)), float(w[clamped].sum()))


def measure_to_csv(mu: DiscreteMeasure, path) -> None:
    """Serialize a measure snapshot: node_index, coordinate..., weight."""
    nodes = mu.grid.nodes()
    d = mu.grid.dimension
    header = "node_index," + ",".join(f"coordinate_{k}" for k in range(d)) + ",weight"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for i in range(mu.grid.num_nodes):
            coords = ",".join(format(c, ".17g") for c in nodes[i])
            fh.write(f"{i},{coords},{format(mu.weights[i], '.17g')}\n")


def measure_from_csv(grid: GridSpec, path) -> DiscreteMeasure:
    """Read weights back from a snapshot written by :func:`measure_to_csv`."""
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    data = np.atleast_2d(data)
    if data.shape[0] != grid.num_nodes:
        raise ValueError(f"snapshot has {data.shape[0]} rows, grid has {grid.num_nodes} nodes")
    return DiscreteMeasure(grid, data[:, -1])
