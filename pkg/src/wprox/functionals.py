"""Energies over measures with first-variation and pointwise-gradient access.

A :class:`FunctionalSpec` bundles the three evaluations every scheme needs:

* ``value(mu)`` — the energy itself,
* ``flat_derivative(mu, x)`` — the first variation, the kernel whose
  integral against a signed zero-mass difference gives directional
  derivatives along linear interpolations of measures,
* ``wasserstein_gradient(mu, x)`` — its spatial gradient,

together with three regularity constants: a sup bound on the first
variation (``flat_bound``), its Lipschitz constant in (point, measure)
(``flat_lipschitz``), and the Lipschitz constant of the spatial gradient
(``gradient_lipschitz``).  The constants drive the convergence-rate
formulas; for the network loss they are empirical grid estimates.

First variations are returned without the zero-mean normalization: every
consumer here either integrates them against zero-mass differences or
exponentiates and renormalizes, so the additive constant cancels.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .measures import DiscreteMeasure, GridSpec

__all__ = [
    "FunctionalSpec",
    "NNDataset",
    "zero_functional",
    "linear_potential",
    "interaction_energy",
    "nn_l2_loss",
    "nn_dataset_from_csv",
    "check_flat_convexity",
]

ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda t: 1.0 - np.tanh(t) ** 2),
    "sigmoid": (
        lambda t: 1.0 / (1.0 + np.exp(-t)),
        lambda t: np.exp(-t) / (1.0 + np.exp(-t)) ** 2,
    ),
}


@dataclass(frozen=True)
class FunctionalSpec:
    """An energy F over discrete measures with its first-order calculus.

    ``flat_derivative`` and ``wasserstein_gradient`` are vectorized over
    evaluation points: they accept an (k, d) array and return (k,) and
    (k, d) arrays respectively.
    """

    name: str
    value: Callable[[DiscreteMeasure], float]
    flat_derivative: Callable[[DiscreteMeasure, np.ndarray], np.ndarray]
    wasserstein_gradient: Callable[[DiscreteMeasure, np.ndarray], np.ndarray]
    flat_bound: float
    flat_lipschitz: float
    gradient_lipschitz: float

    def __post_init__(self):
        for label, c in (
            ("flat_bound", self.flat_bound),
            ("flat_lipschitz", self.flat_lipschitz),
            ("gradient_lipschitz", self.gradient_lipschitz),
        ):
            if c < 0 or not np.isfinite(c):
                raise ValueError(f"{label} must be finite and >= 0, got {c}")


def zero_functional() -> FunctionalSpec:
    """F = 0; reduces every scheme to plain proximal descent toward the reference."""
    return FunctionalSpec(
        name="zero",
        value=lambda mu: 0.0,
        flat_derivative=lambda mu, x: np.zeros(np.atleast_2d(x).shape[0]),
        wasserstein_gradient=lambda mu, x: np.zeros_like(np.atleast_2d(x), dtype=float),
        flat_bound=0.0,
        flat_lipschitz=0.0,
        gradient_lipschitz=0.0,
    )


def linear_potential(
    f: Callable[[np.ndarray], np.ndarray],
    grad_f: Callable[[np.ndarray], np.ndarray],
    flat_bound: float,
    flat_lipschitz: float,
    gradient_lipschitz: float,
    name: str = "linear",
) -> FunctionalSpec:
    """F(mu) = integral of f against mu.

    The first variation is f itself, independent of the measure; the caller
    supplies sup|f|, Lip(f) and Lip(grad f).
    """

    def value(mu: DiscreteMeasure) -> float:
        return float(mu.weights @ np.asarray(f(mu.grid.nodes()), dtype=float))

    def flat(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        return np.asarray(f(pts), dtype=float).reshape(pts.shape[0])

    def grad(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        return np.asarray(grad_f(pts), dtype=float).reshape(pts.shape)

    return FunctionalSpec(name, value, flat, grad, flat_bound, flat_lipschitz, gradient_lipschitz)


def interaction_energy(
    kernel: Callable[[np.ndarray, np.ndarray], np.ndarray],
    kernel_grad1: Callable[[np.ndarray, np.ndarray], np.ndarray],
    flat_bound: float,
    flat_lipschitz: float,
    gradient_lipschitz: float,
    check_points: np.ndarray | None = None,
    name: str = "interaction",
) -> FunctionalSpec:
    """Pairwise energy (1/2) sum_ij w_i w_j W(x_i, x_j) for a symmetric kernel.

    ``kernel(x, y)`` must broadcast over (k, d) point arrays; ``kernel_grad1``
    is its gradient in the first argument.  If ``check_points`` is given,
    symmetry is verified on sampled pairs at construction time.
    """
    if check_points is not None:
        pts = np.atleast_2d(check_points)
        rng = np.random.default_rng(0)
        take = min(32, len(pts))
        ii = rng.choice(len(pts), size=take, replace=False)
        jj = rng.choice(len(pts), size=take, replace=False)
        fwd = np.asarray(kernel(pts[ii], pts[jj]), dtype=float)
        bwd = np.asarray(kernel(pts[jj], pts[ii]), dtype=float)
        worst = float(np.max(np.abs(fwd - bwd))) if take else 0.0
        if worst > 1e-12:
            raise ValueError(f"kernel is asymmetric on sampled pairs (max gap {worst:.3e})")

    def value(mu: DiscreteMeasure) -> float:
        pts = mu.grid.nodes()
        sup = mu.support
        xs = pts[sup]
        ws = mu.weights[sup]
        k = np.asarray(kernel(xs[:, None, :], xs[None, :, :]), dtype=float)
        return 0.5 * float(ws @ k @ ws)

    def flat(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        sup = mu.support
        xs = mu.grid.nodes()[sup]
        ws = mu.weights[sup]
        k = np.asarray(kernel(pts[:, None, :], xs[None, :, :]), dtype=float)
        return k @ ws

    def grad(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        sup = mu.support
        xs = mu.grid.nodes()[sup]
        ws = mu.weights[sup]
        g = np.asarray(kernel_grad1(pts[:, None, :], xs[None, :, :]), dtype=float)
        return np.tensordot(g, ws, axes=([1], [0]))

    return FunctionalSpec(name, value, flat, grad, flat_bound, flat_lipschitz, gradient_lipschitz)


@dataclass(frozen=True)
class NNDataset:
    """Training data (y_k, z_k) for the two-layer network loss.

    ``targets`` has shape (M,), ``features`` shape (M, d-1).  ``clip``
    bounds the output-layer weight through a saturating reparameterization,
    keeping the first variation uniformly bounded.
    """

    targets: np.ndarray = field(repr=False)
    features: np.ndarray = field(repr=False)
    clip: float = 1.0
    activation: str = "tanh"

    def __post_init__(self):
        y = np.asarray(self.targets, dtype=float).reshape(-1)
        z = np.atleast_2d(np.asarray(self.features, dtype=float))
        if z.shape[0] != y.shape[0]:
            raise ValueError("targets and features disagree on sample count")
        if y.size == 0:
            raise ValueError("dataset must contain at least one sample")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(z))):
            raise ValueError("dataset contains non-finite entries")
        if self.clip <= 0:
            raise ValueError(f"clip threshold must be positive, got {self.clip}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        y.flags.writeable = False
        z.flags.writeable = False
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "features", z)

    @property
    def num_samples(self) -> int:
        return self.targets.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def nn_dataset_from_csv(path, clip: float = 1.0, activation: str = "tanh") -> NNDataset:
    """Load rows ``y, z_1, ..., z_{d-1}`` from a headerless CSV file."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and any(cell.strip() for cell in row):
                rows.append([float(cell) for cell in row])
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] < 2:
        raise ValueError("expected rows of the form y, z_1, ..., z_{d-1}")
    return NNDataset(data[:, 0], data[:, 1:], clip=clip, activation=activation)


def _unit_features(x: np.ndarray, data: NNDataset):
    """phi_hat(x, z_k) for all points x and all samples, shape (k, M)."""
    act, _ = ACTIVATIONS[data.activation]
    w = x[:, : data.feature_dim]
    b = x[:, data.feature_dim]
    out_layer = data.clip * np.tanh(b / data.clip)
    return out_layer[:, None] * act(w @ data.features.T)


def _unit_feature_grads(x: np.ndarray, data: NNDataset):
    """Gradient of phi_hat in x, shape (k, M, d)."""
    act, act_d = ACTIVATIONS[data.activation]
    w = x[:, : data.feature_dim]
    b = x[:, data.feature_dim]
    pre = w @ data.features.T
    out_layer = data.clip * np.tanh(b / data.clip)
    out_layer_d = 1.0 - np.tanh(b / data.clip) ** 2
    grad = np.empty((x.shape[0], data.num_samples, x.shape[1]))
    grad[:, :, : data.feature_dim] = (out_layer[:, None] * act_d(pre))[:, :, None] * data.features[None, :, :]
    grad[:, :, data.feature_dim] = out_layer_d[:, None] * act(pre)
    return grad


def nn_l2_loss(
    data: NNDataset,
    grid: GridSpec | None = None,
    rng: np.random.Generator | None = None,
    probe_measures: int = 8,
) -> FunctionalSpec:
    """Mean squared prediction error of a mean-field two-layer network.

    A parameter point is x = (w, b); the network output on feature z is the
    expectation of ``clip_fn(b) * activation(<w, z>)`` under the parameter
    measure, and the loss averages squared residuals over the dataset.  The
    first variation carries the factor 2 from differentiating the square
    (validated by finite differences in the test suite).

    When ``grid`` is given, the regularity constants are estimated
    empirically: the sup bound by maximizing over nodes and sampled
    measures, the Lipschitz constants from gradient magnitudes and sampled
    increments on that grid.  Without a grid, conservative analytic bounds
    from the clipped architecture are used.
    """

    def residuals(mu: DiscreteMeasure) -> np.ndarray:
        sup = mu.support
        feats = _unit_features(mu.grid.nodes()[sup], data)
        return data.targets - mu.weights[sup] @ feats

    def value(mu: DiscreteMeasure) -> float:
        r = residuals(mu)
        return float(np.mean(r * r))

    def flat(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        r = residuals(mu)
        return -2.0 * (_unit_features(pts, data) @ r) / data.num_samples

    def grad(mu: DiscreteMeasure, x: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(x)
        r = residuals(mu)
        g = _unit_feature_grads(pts, data)
        return -2.0 * np.tensordot(g, r, axes=([1], [0])) / data.num_samples

    if grid is not None:
        flat_bound, flat_lip, grad_lip = _estimate_nn_constants(
            data, grid, value, flat, grad, rng or np.random.default_rng(0), probe_measures
        )
    else:
        y_max = float(np.max(np.abs(data.targets)))
        feat_sup = data.clip  # |phi_hat| <= clip for bounded activations
        flat_bound = 2.0 * (y_max + feat_sup) * feat_sup
        z_max = float(np.max(np.linalg.norm(data.features, axis=1))) if data.num_samples else 0.0
        lip_phi = data.clip * max(z_max, 1.0)
        flat_lip = 2.0 * (y_max + feat_sup) * lip_phi + 2.0 * feat_sup * feat_sup
        grad_lip = 2.0 * (y_max + feat_sup) * data.clip * (1.0 + z_max) ** 2 + 2.0 * feat_sup * lip_phi

    return FunctionalSpec("nn_l2", value, flat, grad, flat_bound, flat_lip, grad_lip)


def _estimate_nn_constants(data, grid, value, flat, grad, rng, probe_measures):
    from .transport import w2sq  # local import to keep module layering acyclic

    nodes = grid.nodes()
    probes = [
        DiscreteMeasure(grid, rng.dirichlet(np.full(grid.num_nodes, 0.5)))
        for _ in range(probe_measures)
    ]
    flat_vals = np.stack([flat(mu, nodes) for mu in probes])
    grads = np.stack([grad(mu, nodes) for mu in probes])
    flat_bound = float(np.max(np.abs(flat_vals)))

    # Spatial slopes from gradient magnitudes; measure slopes from sampled
    # increments normalized by the exact transport distance.
    spatial_flat = float(np.max(np.linalg.norm(grads, axis=2)))
    spatial_grad = 0.0
    n_pts = len(nodes)
    ii = rng.integers(0, n_pts, size=64)
    jj = rng.integers(0, n_pts, size=64)
    keep = ii != jj
    ii, jj = ii[keep], jj[keep]
    for g in grads:
        dx = np.linalg.norm(nodes[ii] - nodes[jj], axis=1)
        dg = np.linalg.norm(g[ii] - g[jj], axis=1)
        spatial_grad = max(spatial_grad, float(np.max(dg / dx)))

    measure_flat = 0.0
    measure_grad = 0.0
    for a in range(len(probes)):
        for b in range(a + 1, len(probes)):
            dist = np.sqrt(max(w2sq(probes[a], probes[b]), 1e-300))
            measure_flat = max(
                measure_flat, float(np.max(np.abs(flat_vals[a] - flat_vals[b]))) / dist
            )
            measure_grad = max(
                measure_grad,
                float(np.max(np.linalg.norm(grads[a] - grads[b], axis=1))) / dist,
            )
    return flat_bound, max(spatial_flat, measure_flat), max(spatial_grad, measure_grad)


def check_flat_convexity(F: FunctionalSpec, mu: DiscreteMeasure, mu2: DiscreteMeasure) -> float:
    """Convexity slack F(mu2) - F(mu) - <first variation at mu, mu2 - mu>.

    Nonnegative (within numerical tolerance) for every convex-along-lines
    energy; exactly zero when F is linear in the measure.
    """
    if mu.grid != mu2.grid:
        raise ValueError("measures live on different grids")
    kernel = F.flat_derivative(mu, mu.grid.nodes())
    directional = float(kernel @ (mu2.weights - mu.weights))
    return F.value(mu2) - F.value(mu) - directional
