"""Outer iterations: proximal point, prox-linear, proximal gradient.

All three schemes minimize F(mu) + sigma * KL(mu|reference) by repeated
proximal steps and differ in how they treat F:

* proximal point solves the fully implicit step, here by a damped
  re-linearization fixed point: each pass solves the prox-linear step with
  the tilt frozen at the current linearization state, then mixes the state
  toward the new minimizer.
* prox-linear linearizes F at the current iterate, which folds the tilt
  into the reference: one proximal step toward the proximal Gibbs measure.
* proximal gradient pushes the iterate forward along -tau * gradient of F,
  then takes one proximal step toward the plain reference.

The minimizer itself is the fixed point of the proximal Gibbs map and is
computed by (optionally damped) fixed-point iteration on the same grid the
schemes run on, so the optimality gap and the entropy sandwich hold
exactly in the discretized system rather than up to grid bias.

The explicit-Euler pushforward of the relative-entropy gradient is kept
only as a demonstration of why the proximal treatment of the entropy is
needed; it carries no convergence guarantee and is excluded from the
quantitative checks.
"""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .functionals import FunctionalSpec
from .gibbs import PotentialSpec, kl, proximal_gibbs, reference_measure, relative_fisher, grad_log_ratio
from .jko import JkoConfig, JkoResult, jko_step
from .measures import DiscreteMeasure, GridSpec, PointMap, mix, pushforward
from .transport import w2sq_1d

__all__ = [
    "SchemeConfig",
    "RunRow",
    "RunRecord",
    "StepOutcome",
    "SCHEME_KINDS",
    "prox_linear_step",
    "proximal_point_step",
    "proximal_gradient_step",
    "explicit_euler_demo_step",
    "solve_minimizer",
    "rate_bound",
    "run",
]

SCHEME_KINDS = ("proximal_point", "prox_linear", "proximal_gradient", "explicit_euler_demo")


class StepSizeError(ValueError):
    """Step size violates the stability condition of the chosen scheme."""


class FixedPointDivergence(RuntimeError):
    """A fixed-point iteration failed to reach its tolerance."""


@dataclass(frozen=True)
class SchemeConfig:
    """Outer-iteration settings shared by all schemes.

    The ``fp_*`` fields drive the implicit re-linearization fixed point of
    the proximal point scheme: stop when the squared transport distance
    between successive inner minimizers falls below ``fp_tol ** 2``, mixing
    the linearization state with weight ``fp_damping`` toward the latest
    minimizer.
    """

    kind: str
    tau: float
    sigma: float
    max_outer_iters: int = 100
    outer_tol: float = 1e-12
    fp_tol: float = 1e-7
    fp_max_iters: int = 60
    fp_damping: float = 0.5
    jko: JkoConfig = field(default_factory=JkoConfig)

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown scheme kind {self.kind!r}")
        if self.tau <= 0 or self.sigma <= 0:
            raise ValueError("tau and sigma must be positive")
        if not 0.0 < self.fp_damping <= 1.0:
            raise ValueError(f"fp_damping must be in (0, 1], got {self.fp_damping}")
        if self.max_outer_iters <= 0 or self.fp_max_iters <= 0:
            raise ValueError("iteration caps must be positive")
        if self.outer_tol <= 0 or self.fp_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass(frozen=True)
class StepOutcome:
    """One outer step plus the ingredients of its optimality identity.

    ``anchor`` is the measure the transport penalty was anchored at and
    ``fisher_reference`` the measure whose log-density-ratio gradient the
    first-order condition equates with the rescaled transport displacement.
    """

    result: JkoResult
    anchor: DiscreteMeasure
    fisher_reference: DiscreteMeasure
    clamped_mass: float = 0.0
    linearizations: int = 1


@dataclass(frozen=True)
class RunRow:
    n: int
    f_sigma: float
    gap: float
    kl_to_opt: float
    w2sq_to_opt: float
    kl_to_gibbs: float
    fisher_to_gibbs: float
    inner_iters: int
    inner_converged: bool
    # beyond the serialized schema: step-level diagnostics
    w2sq_step: float = math.nan
    fw_residual: float = math.nan
    clamped_mass: float = 0.0


@dataclass
class RunRecord:
    kind: str
    config: SchemeConfig
    rows: list[RunRow]
    final: DiscreteMeasure
    minimizer: DiscreteMeasure
    wall_time: float
    notes: list[str] = field(default_factory=list)

    def gaps(self) -> np.ndarray:
        return np.array([r.gap for r in self.rows])


def f_sigma_value(F: FunctionalSpec, mu: DiscreteMeasure, sigma: float, pi: DiscreteMeasure) -> float:
    return F.value(mu) + sigma * kl(mu, pi)


def prox_linear_step(
    F: FunctionalSpec,
    mu: DiscreteMeasure,
    cfg: SchemeConfig,
    U: PotentialSpec,
    warm=None,
) -> StepOutcome:
    """Linearize F at the iterate and take one proximal step.

    Folding the linearization into the reference makes this a plain
    proximal step toward the proximal Gibbs measure of the iterate.
    """
    rho = proximal_gibbs(F, mu, cfg.sigma, U)
    result = jko_step(rho, mu, cfg.tau, cfg.sigma, cfg.jko, warm=warm)
    return StepOutcome(result=result, anchor=mu, fisher_reference=rho)


def proximal_point_step(
    F: FunctionalSpec,
    mu: DiscreteMeasure,
    cfg: SchemeConfig,
    U: PotentialSpec,
    warm=None,
) -> StepOutcome:
    """Solve the implicit step by re-linearization with damped mixing.

    The linearization state starts at the iterate; each pass solves the
    step with the tilt frozen there (anchor fixed at the iterate) and then
    mixes the state toward the new minimizer.  A fixed point of this map
    satisfies the implicit first-order optimality condition, which the
    diagnostics verify through the Fisher/transport identity.
    """
    lin_state = mu
    prev_rho: DiscreteMeasure | None = None
    prev_min: DiscreteMeasure | None = None
    result: JkoResult | None = None
    total_inner = 0
    converged = False
    passes = 0
    for passes in range(1, cfg.fp_max_iters + 1):
        rho = proximal_gibbs(F, lin_state, cfg.sigma, U)
        if prev_rho is not None and np.array_equal(rho.weights, prev_rho.weights):
            # linearization exactly stationary (e.g. F constant or linear in
            # the measure): re-solving the identical subproblem cannot move
            converged = True
            passes -= 1
            break
        result = jko_step(rho, mu, cfg.tau, cfg.sigma, cfg.jko, warm=warm)
        total_inner += result.iterations
        warm = result.warm
        z = result.minimizer
        if prev_min is not None and w2sq_1d_or_general(z, prev_min) <= cfg.fp_tol**2:
            converged = True
            break
        lin_state = mix(lin_state, z, cfg.fp_damping)
        prev_rho = rho
        prev_min = z
    final_rho = proximal_gibbs(F, result.minimizer, cfg.sigma, U)
    result = replace(
        result, iterations=total_inner, converged=bool(converged and result.converged)
    )
    return StepOutcome(
        result=result, anchor=mu, fisher_reference=final_rho, linearizations=passes
    )


def w2sq_1d_or_general(a: DiscreteMeasure, b: DiscreteMeasure) -> float:
    if a.grid.dimension == 1:
        return w2sq_1d(a, b)
    from .transport import w2sq

    return w2sq(a, b)


def proximal_gradient_step(
    F: FunctionalSpec,
    mu: DiscreteMeasure,
    cfg: SchemeConfig,
    U: PotentialSpec,
    warm=None,
) -> StepOutcome:
    """Push the iterate along -tau * gradient of F, then step toward the reference.

    The pushforward map is optimal (hence the transport displacement
    identity applies) only when tau * gradient_lipschitz < 1; violating
    that is a construction error, not a warning.
    """
    lip = F.gradient_lipschitz
    if lip > 0 and cfg.tau >= 1.0 / lip:
        raise StepSizeError(
            f"proximal_gradient requires tau < 1/gradient_lipschitz = {1.0 / lip:.6g}, "
            f"got tau = {cfg.tau}"
        )
    nodes = mu.grid.nodes()
    drift = np.atleast_2d(F.wasserstein_gradient(mu, nodes))
    pf = pushforward(mu, PointMap(nodes - cfg.tau * drift))
    pi = reference_measure(U, mu.grid)
    result = jko_step(pi, pf.measure, cfg.tau, cfg.sigma, cfg.jko, warm=warm)
    return StepOutcome(
        result=result,
        anchor=pf.measure,
        fisher_reference=pi,
        clamped_mass=pf.clamped_mass,
    )


def explicit_euler_demo_step(
    mu: DiscreteMeasure, tau: float, sigma: float, U: PotentialSpec
) -> DiscreteMeasure:
    """Forward-Euler pushforward of the relative-entropy gradient flow.

    Demonstration only: linearizing the entropy gives no descent guarantee
    and the iteration is known to fail for badly matched start/step size.
    """
    pi = reference_measure(U, mu.grid)
    drift = grad_log_ratio(mu, pi).values
    nodes = mu.grid.nodes()
    return pushforward(mu, PointMap(nodes - tau * sigma * drift)).measure


def solve_minimizer(
    F: FunctionalSpec,
    sigma: float,
    U: PotentialSpec,
    grid: GridSpec,
    tol: float = 1e-14,
    max_iters: int = 10_000,
    damping: float = 1.0,
    init: DiscreteMeasure | None = None,
) -> DiscreteMeasure:
    """Fixed point of the proximal Gibbs map, i.e. the minimizer of F^sigma.

    Iterates mu <- (1 - damping) * mu + damping * gibbs(mu) until
    KL(gibbs(mu) | mu) <= tol, returning the point at which the residual
    was measured.  Raises :class:`FixedPointDivergence` with the last
    residual on failure.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must be in (0, 1], got {damping}")
    mu = init if init is not None else reference_measure(U, grid)
    residual = math.inf
    for _ in range(max_iters):
        nxt = proximal_gibbs(F, mu, sigma, U)
        residual = kl(nxt, mu)
        if residual <= tol:
            return mu
        mu = nxt if damping == 1.0 else mix(mu, nxt, damping)
    raise FixedPointDivergence(
        f"proximal Gibbs fixed point not reached in {max_iters} iterations; "
        f"last residual {residual:.3e}"
    )


def rate_bound(
    kind: str,
    tau: float,
    sigma: float,
    alpha_u: float,
    flat_bound: float,
    gradient_lipschitz: float = 0.0,
) -> float:
    """Per-step contraction base kappa > 1 of the linear convergence bound.

    proximal_point:    kappa = 1 + tau*sigma*alpha_u * exp(-4C/sigma)
    prox_linear:       kappa = 1 + tau*sigma*alpha_u*(1 - 2*tau*L) /
                                   (1 + (tau*L)^2) * exp(-4C/sigma)
    proximal_gradient: kappa = 1 + tau*sigma*alpha_u*(1 - tau*L) /
                                   (1 + 4*(tau*L)^2) * exp(-4C/sigma)

    with C the sup bound on the first variation and L the gradient
    Lipschitz constant.  Raises ValueError naming the nonpositive factor
    whenever the formula fails to give kappa > 1.
    """
    if tau <= 0 or sigma <= 0 or alpha_u <= 0:
        raise ValueError("tau, sigma, alpha_u must be positive")
    if flat_bound < 0 or gradient_lipschitz < 0:
        raise ValueError("flat_bound and gradient_lipschitz must be >= 0")
    damp = math.exp(-4.0 * flat_bound / sigma)
    tl = tau * gradient_lipschitz
    if kind == "proximal_point":
        gain = tau * sigma * alpha_u * damp
    elif kind == "prox_linear":
        # Note: the nominal step-size condition tau < 2/L leaves the factor
        # (1 - 2 tau L) nonpositive on [1/(2L), 2/L); only tau < 1/(2L)
        # yields a contractive bound, and that is what we enforce.
        factor = 1.0 - 2.0 * tl
        if factor <= 0.0:
            raise ValueError(
                "prox_linear rate factor 1 - 2*tau*gradient_lipschitz = "
                f"{factor:.6g} is nonpositive; need tau < 1/(2*gradient_lipschitz) = "
                f"{0.5 / gradient_lipschitz:.6g}"
            )
        gain = tau * sigma * alpha_u * factor * damp / (1.0 + tl * tl)
    elif kind == "proximal_gradient":
        factor = 1.0 - tl
        if factor <= 0.0:
            raise ValueError(
                "proximal_gradient rate factor 1 - tau*gradient_lipschitz = "
                f"{factor:.6g} is nonpositive; need tau < 1/gradient_lipschitz = "
                f"{1.0 / gradient_lipschitz:.6g}"
            )
        gain = tau * sigma * alpha_u * factor * damp / (1.0 + 4.0 * tl * tl)
    else:
        raise ValueError(f"no rate bound for scheme kind {kind!r}")
    kappa = 1.0 + gain
    if kappa <= 1.0 + 1e-15:
        raise ValueError(
            f"rate bound is vacuous (kappa = {kappa!r}); the exponential factor "
            f"exp(-4*flat_bound/sigma) = {damp:.3e} has annihilated the gain term"
        )
    return kappa


class _EntropicDistanceTracker:
    """Warm-started entropic estimate of squared W_2 for 2D run metrics.

    Exact transport metrics in 2D would need one LP per outer iteration;
    consecutive iterates barely move, so log-domain scaling with carried
    potentials converges in a handful of sweeps per call.
    """

    def __init__(self, epsilon: float, tol: float = 1e-8, max_iters: int = 5_000):
        self.epsilon = epsilon
        self.tol = tol
        self.max_iters = max_iters
        self._f = None
        self._g = None

    def value(self, a: DiscreteMeasure, b: DiscreteMeasure) -> float:
        from .transport import _pairwise_sq_dists

        eps = self.epsilon
        cost = _pairwise_sq_dists(a.grid.nodes(), b.grid.nodes())
        la = np.log(np.maximum(a.weights, 1e-300))
        lb = np.log(np.maximum(b.weights, 1e-300))
        f = self._f if self._f is not None else np.zeros(len(la))
        g = self._g if self._g is not None else np.zeros(len(lb))
        for _ in range(self.max_iters):
            f = eps * (la - _lse_rows_local((g[None, :] - cost) / eps))
            g = eps * (lb - _lse_rows_local(((f[:, None] - cost) / eps).T))
            plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
            res = float(np.max(np.abs(plan.sum(axis=1) - a.weights)))
            if res <= self.tol:
                break
        self._f, self._g = f, g
        return float(np.sum(plan * cost))


def _lse_rows_local(m: np.ndarray) -> np.ndarray:
    mx = np.max(m, axis=1)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    return safe + np.log(np.sum(np.exp(m - safe[:, None]), axis=1))


def run(
    kind: str,
    F: FunctionalSpec,
    mu0: DiscreteMeasure,
    cfg: SchemeConfig,
    U: PotentialSpec,
    minimizer: DiscreteMeasure | None = None,
    minimizer_tol: float = 1e-14,
) -> RunRecord:
    """Iterate a scheme from ``mu0``, recording the full metric stream.

    The optimality gap is measured against the fixed point of the proximal
    Gibbs map on the same grid (``minimizer`` may be supplied to skip that
    solve).  The run stops at ``max_outer_iters``, when the gap falls to
    ``outer_tol``, or after three consecutive inner-solver failures.
    """
    if kind != cfg.kind:
        raise ValueError(f"kind {kind!r} disagrees with config kind {cfg.kind!r}")
    start = time.perf_counter()
    grid = mu0.grid
    pi = reference_measure(U, grid)
    mu_star = minimizer if minimizer is not None else solve_minimizer(
        F, cfg.sigma, U, grid, tol=minimizer_tol
    )
    f_star = f_sigma_value(F, mu_star, cfg.sigma, pi)
    notes: list[str] = []

    if kind == "prox_linear" and F.gradient_lipschitz > 0:
        try:
            rate_bound(kind, cfg.tau, cfg.sigma, U.strong_convexity, F.flat_bound, F.gradient_lipschitz)
        except ValueError as exc:
            warnings.warn(f"prox_linear rate bound is vacuous: {exc}", stacklevel=2)
            notes.append(f"vacuous rate bound: {exc}")

    exact_metrics = grid.dimension == 1
    if not exact_metrics:
        h2 = min(h * h for h in grid.spacings)
        opt_tracker = _EntropicDistanceTracker(epsilon=h2)
        step_tracker = _EntropicDistanceTracker(epsilon=h2)
        notes.append("2D transport metrics are entropic estimates")

    def dist_to_opt(mu):
        return w2sq_1d(mu, mu_star) if exact_metrics else opt_tracker.value(mu, mu_star)

    def dist_step(a, b):
        return w2sq_1d(a, b) if exact_metrics else step_tracker.value(a, b)

    def make_row(n, mu, inner_iters, inner_conv, w2_step, fw_res, clamped):
        gibbs = proximal_gibbs(F, mu, cfg.sigma, U)
        f_val = f_sigma_value(F, mu, cfg.sigma, pi)
        return RunRow(
            n=n,
            f_sigma=f_val,
            gap=f_val - f_star,
            kl_to_opt=kl(mu, mu_star),
            w2sq_to_opt=dist_to_opt(mu),
            kl_to_gibbs=kl(mu, gibbs),
            fisher_to_gibbs=relative_fisher(mu, gibbs),
            inner_iters=inner_iters,
            inner_converged=inner_conv,
            w2sq_step=w2_step,
            fw_residual=fw_res,
            clamped_mass=clamped,
        )

    mu = mu0
    rows = [make_row(0, mu0, 0, True, math.nan, math.nan, 0.0)]
    warm = None
    consecutive_failures = 0
    for n in range(1, cfg.max_outer_iters + 1):
        if kind == "explicit_euler_demo":
            mu_next = explicit_euler_demo_step(mu, cfg.tau, cfg.sigma, U)
            rows.append(make_row(n, mu_next, 0, True, dist_step(mu_next, mu), math.nan, 0.0))
            mu = mu_next
            continue
        if kind == "prox_linear":
            outcome = prox_linear_step(F, mu, cfg, U, warm=warm)
        elif kind == "proximal_point":
            outcome = proximal_point_step(F, mu, cfg, U, warm=warm)
        else:
            outcome = proximal_gradient_step(F, mu, cfg, U, warm=warm)
        warm = outcome.result.warm
        mu_next = outcome.result.minimizer
        w2_step = dist_step(mu_next, outcome.anchor)
        fisher = relative_fisher(mu_next, outcome.fisher_reference)
        scale = (cfg.tau * cfg.sigma) ** 2
        fw_res = abs(fisher - w2_step / scale) / max(fisher, w2_step / scale, 1e-300)
        if outcome.clamped_mass > 1e-6:
            notes.append(f"step {n}: clamped pushforward mass {outcome.clamped_mass:.3e}")
        rows.append(
            make_row(
                n,
                mu_next,
                outcome.result.iterations,
                outcome.result.converged,
                w2_step,
                fw_res,
                outcome.clamped_mass,
            )
        )
        consecutive_failures = 0 if outcome.result.converged else consecutive_failures + 1
        if consecutive_failures >= 3:
            notes.append(f"aborted after three consecutive inner failures at step {n}")
            mu = mu_next
            break
        mu = mu_next
        if rows[-1].gap <= cfg.outer_tol:
            break

    return RunRecord(
        kind=kind,
        config=cfg,
        rows=rows,
        final=mu,
        minimizer=mu_star,
        wall_time=time.perf_counter() - start,
        notes=notes,
    )
