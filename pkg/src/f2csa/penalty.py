"""Smoothed penalty Lagrangian and the stochastic hypergradient oracle.

Given an approximate lower-level pair (y~*, lam~) at a point x, the penalty

    L(x, y) = f(x, y)
              + a1 (g(x, y) + lam~' h(x, y) - g(x, y~*))
              + (a2 / 2) sum_i rho_i h_i(x, y)^2

with a1 = alpha^-2, a2 = alpha^-4 is minimized over y, and the hypergradient
estimate is the average of N_g sampled x-partials of L at the minimizer. The
activations rho_i = sigma_h(h_i(x, y~*)) * sigma_lambda(lam~_i) gate the
quadratic term onto near-active rows with positive multipliers and are frozen
before the minimization: y~*, lam~ and rho are treated as constants under both
grad_y and grad_x (no differentiation through the inner argmin), so the
-a1 g(x, y~*) term contributes -a1 grad_x g(x, y~*).

Each stochastic sample evaluates one sampled penalty function: the two g
appearances, g(x, y) and g(x, y~*), share a single noise realization within a
sample (paired generators), which keeps the a1-scaled difference bounded.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonconvexPenaltyError, SolverError
from .problem import Array, BilevelProblem, LowerLevelSolution, constraint_values
from .spd import SpdConfig, spd_solve


@dataclass(frozen=True)
class PenaltyConfig:
    """alpha and every quantity derived from it.

    alpha1 = alpha^-2, alpha2 = alpha^-4 and delta = alpha^3 are stored at
    construction, exactly as the defining expressions evaluate. The sigma_h
    ramp width is tau * delta with tau = tau_scale * delta.
    """

    alpha: float
    tau_scale: float = 1.0
    eps_lambda: float = 1e-3
    N_g: int = 1
    ll_tol_scale: float = 0.3   # SPD residual target = ll_tol_scale * mu_g * delta
    pen_tol_scale: float = 0.05  # penalty stop = pen_tol_scale * mu_pen * delta
    alpha1: float = field(init=False)
    alpha2: float = field(init=False)
    delta: float = field(init=False)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if min(self.tau_scale, self.eps_lambda, self.ll_tol_scale, self.pen_tol_scale) <= 0:
            raise ValueError("tau_scale, eps_lambda and tolerance scales must be positive")
        if self.N_g < 1:
            raise ValueError("N_g must be a positive integer")
        object.__setattr__(self, "alpha1", self.alpha ** -2)
        object.__setattr__(self, "alpha2", self.alpha ** -4)
        object.__setattr__(self, "delta", self.alpha ** 3)

    @property
    def tau(self) -> float:
        return self.tau_scale * self.delta

    @property
    def tau_delta(self) -> float:
        return self.tau * self.delta


def sigma_h(z, tau_delta: float):
    """Constraint-side activation: 0 below -tau*delta, linear ramp, 1 at z >= 0."""
    if tau_delta <= 0:
        raise ValueError("tau_delta must be positive")
    z = np.asarray(z, dtype=float)
    out = np.where(z >= 0.0, 1.0, np.where(z < -tau_delta, 0.0, (tau_delta + z) / tau_delta))
    return float(out) if out.ndim == 0 else out


def sigma_lambda(z, eps_lambda: float):
    """Multiplier-side activation: 0 at z <= 0, linear ramp, 1 at z >= eps_lambda."""
    if eps_lambda <= 0:
        raise ValueError("eps_lambda must be positive")
    z = np.asarray(z, dtype=float)
    out = np.where(z <= 0.0, 0.0, np.where(z >= eps_lambda, 1.0, z / eps_lambda))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ActivationState:
    """rho and the quantities it was built from; frozen for one oracle call."""

    rho: Array
    h_at_ytilde: Array
    lambda_tilde: Array

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        if rho.size and (rho.min() < 0.0 or rho.max() > 1.0):
            raise ValueError("rho must lie in [0, 1]")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "h_at_ytilde", np.asarray(self.h_at_ytilde, dtype=float))
        object.__setattr__(self, "lambda_tilde", np.asarray(self.lambda_tilde, dtype=float))


def build_activation(problem: BilevelProblem, x: Array, ll: LowerLevelSolution,
                     cfg: PenaltyConfig) -> ActivationState:
    h = constraint_values(problem.constraints, x, ll.y)
    rho = sigma_h(h, cfg.tau_delta) * sigma_lambda(ll.lam, cfg.eps_lambda) if h.size else np.zeros(0)
    return ActivationState(rho=np.asarray(rho, dtype=float), h_at_ytilde=h, lambda_tilde=ll.lam)


def _paired_rngs(stream: np.random.Generator | None):
    """Two generators with identical state: one sampled function, two eval points."""
    if stream is None:
        return None, None
    seed = int(stream.integers(0, 2 ** 63 - 1))
    return np.random.default_rng(seed), np.random.default_rng(seed)


def penalty_value(problem: BilevelProblem, x: Array, y: Array, ll: LowerLevelSolution,
                  act: ActivationState, cfg: PenaltyConfig,
                  stream: np.random.Generator | None = None) -> float:
    rg1, rg2 = _paired_rngs(stream)
    f = problem.value_f(x, y, stream)
    g_y = problem.value_g(x, y, rg1)
    g_star = problem.value_g(x, ll.y, rg2)
    val = f + cfg.alpha1 * (g_y - g_star)
    if problem.p:
        h = constraint_values(problem.constraints, x, y)
        val += cfg.alpha1 * float(ll.lam @ h) + 0.5 * cfg.alpha2 * float(act.rho @ (h * h))
    return float(val)


def penalty_grads(problem: BilevelProblem, x: Array, y: Array, ll: LowerLevelSolution,
                  act: ActivationState, cfg: PenaltyConfig,
                  stream: np.random.Generator | None = None) -> tuple[Array, Array]:
    """(grad_x L, grad_y L) with y~*, lam~, rho held constant.

    Constraint contributions are exact (h is affine): grad_x h = A,
    grad_y h = -B. One call consumes one f sample and one paired g sample.
    """
    rg1, rg2 = _paired_rngs(stream)
    fx, fy = problem.grad_f(x, y, stream)
    ggx_y, ggy_y = problem.grad_g(x, y, rg1)
    ggx_star, _ = problem.grad_g(x, ll.y, rg2)
    gx = fx + cfg.alpha1 * (ggx_y - ggx_star)
    gy = fy + cfg.alpha1 * ggy_y
    if problem.p:
        c = problem.constraints
        h = constraint_values(c, x, y)
        w = act.rho * h
        gx = gx + cfg.alpha1 * (c.A.T @ ll.lam) + cfg.alpha2 * (c.A.T @ w)
        gy = gy - cfg.alpha1 * (c.B.T @ ll.lam) - cfg.alpha2 * (c.B.T @ w)
    return gx, gy


def grad_x_penalty(problem, x, y, ll, act, cfg, stream=None) -> Array:
    return penalty_grads(problem, x, y, ll, act, cfg, stream)[0]


def grad_y_penalty(problem, x, y, ll, act, cfg, stream=None) -> Array:
    return penalty_grads(problem, x, y, ll, act, cfg, stream)[1]


# ---------------------------------------------------------------------------
# Penalty curvature and minimization
# ---------------------------------------------------------------------------

_EXACT_HESSIAN_DIM = 400


def penalty_y_hessian(problem: BilevelProblem, act: ActivationState,
                      cfg: PenaltyConfig) -> Array | None:
    """Exact y-Hessian hess_f_yy + a1 hess_g_yy + a2 B'diag(rho)B when known."""
    if problem.hess_f_yy is None or problem.hess_g_yy is None:
        return None
    H = problem.hess_f_yy + cfg.alpha1 * problem.hess_g_yy
    if problem.p:
        B = problem.constraints.B
        H = H + cfg.alpha2 * (B.T @ (act.rho[:, None] * B))
    return H


def _power_norm(matvec, dim: int, iters: int = 25) -> float:
    v = np.random.default_rng(1).standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam = float(np.linalg.norm(w))
        if lam == 0:
            return 0.0
        v = w / lam
    return lam


def penalty_curvature(problem: BilevelProblem, act: ActivationState,
                      cfg: PenaltyConfig) -> tuple[float, float]:
    """(mu_pen, L_pen) for L(x, .).

    Small quadratic problems get the exact eigenvalue range of the assembled
    Hessian and a hard error when it is not positive definite; large ones use
    operator-norm bounds (warning instead of an error, since the bound on
    mu_pen is conservative).
    """
    m = problem.m
    if problem.hess_f_yy is not None and problem.hess_g_yy is not None and m <= _EXACT_HESSIAN_DIM:
        H = penalty_y_hessian(problem, act, cfg)
        evals = np.linalg.eigvalsh(H)
        mu_pen, L_pen = float(evals[0]), float(evals[-1])
        if mu_pen <= 0:
            raise NonconvexPenaltyError(
                f"alpha too large for strong convexity: penalty y-Hessian has "
                f"lambda_min = {mu_pen:.3e} at alpha = {cfg.alpha}"
            )
        return mu_pen, L_pen
    mu_g = problem.mu_g if problem.mu_g is not None else 1.0
    C_g = problem.smooth_g if problem.smooth_g is not None else mu_g
    if problem.hess_f_yy is not None:
        norm_f_yy = problem.meta.get("norm_hess_f_yy")
        if norm_f_yy is None:
            norm_f_yy = _power_norm(lambda v: problem.hess_f_yy @ v, m)
    else:
        norm_f_yy = 0.0
    rho_max = float(act.rho.max()) if act.rho.size else 0.0
    L_pen = norm_f_yy + cfg.alpha1 * C_g + cfg.alpha2 * rho_max * problem.constraints.norm_B ** 2
    mu_pen = cfg.alpha1 * mu_g - norm_f_yy
    if mu_pen <= 0:
        warnings.warn(
            f"penalty strong-convexity bound nonpositive at alpha = {cfg.alpha}; "
            "proceeding with alpha1*mu_g/2 (exact Hessian check unavailable at this size)",
            stacklevel=2,
        )
        mu_pen = 0.5 * cfg.alpha1 * mu_g
    return mu_pen, L_pen


@dataclass(frozen=True)
class PenaltyMinResult:
    y: Array
    iterations: int
    grad_norm: float
    oracle_calls: int


def minimize_penalty(problem: BilevelProblem, x: Array, ll: LowerLevelSolution,
                     act: ActivationState, cfg: PenaltyConfig,
                     stream: np.random.Generator | None = None,
                     y0: Array | None = None, max_iters: int = 50_000) -> PenaltyMinResult:
    """argmin_y L(x, y) to ||grad_y L|| <= mu_pen * delta (=> distance <= delta).

    Exact gradients: plain gradient descent with step 1/L_pen. Noisy
    gradients: variance-reduced epochs with batched full-gradient snapshots
    at an anchor point; inner steps use one shared noise realization for the
    iterate/anchor pair so the correction is a control variate.
    """
    mu_pen, L_pen = penalty_curvature(problem, act, cfg)
    step = 1.0 / L_pen
    y = (ll.y if y0 is None else np.asarray(y0, dtype=float)).copy()
    calls = 0
    stochastic = problem.noise_sigma > 0 and stream is not None
    # Exact-gradient runs tighten the stop by pen_tol_scale so the lower-level
    # term dominates the alpha-bias; noisy runs use the plain distance-delta
    # translation (tighter targets sit below the sampling floor).
    target = (1.0 if stochastic else cfg.pen_tol_scale) * mu_pen * cfg.delta

    if not stochastic:
        grad_norm = np.inf
        for it in range(max_iters + 1):
            gy = penalty_grads(problem, x, y, ll, act, cfg, None)[1]
            grad_norm = float(np.linalg.norm(gy))
            if grad_norm <= target:
                return PenaltyMinResult(y=y, iterations=it, grad_norm=grad_norm, oracle_calls=calls)
            y = y - step * gy
        raise SolverError(
            f"penalty minimization: ||grad|| = {grad_norm:.3e} > {target:.3e} "
            f"after {max_iters} iterations",
            best_residual=grad_norm,
        )

    # The paired control variate makes each inner step nearly a deterministic
    # gradient step (its noise scales with ||y - anchor||), so the step can sit
    # close to the exact-gradient 1/L rather than the worst-case SVRG 1/(4L).
    eta = 1.0 / (1.5 * L_pen)
    k_inner = int(np.clip(math.ceil(2.0 * L_pen / mu_pen), 4, 100))
    max_epochs = 30
    snap_batch = 8
    anchor = y
    best_y, best_norm = anchor, np.inf
    iterations = 0
    for _ in range(max_epochs):
        samples = np.empty((snap_batch, problem.m))
        for j in range(snap_batch):
            samples[j] = penalty_grads(problem, x, anchor, ll, act, cfg, stream)[1]
        calls += snap_batch
        snap = samples.mean(axis=0)
        grad_norm = float(np.linalg.norm(snap))
        if grad_norm < best_norm:
            best_norm, best_y = grad_norm, anchor
        # Measurement floor of the snapshot estimate: per-sample scatter / sqrt(B).
        scatter = float(np.sqrt(((samples - snap) ** 2).sum(axis=1).mean()))
        floor = scatter / math.sqrt(snap_batch)
        if grad_norm <= max(target, 1.5 * floor):
            return PenaltyMinResult(y=anchor, iterations=iterations, grad_norm=grad_norm,
                                    oracle_calls=calls)
        if grad_norm < 3.0 * floor and snap_batch < 256:
            snap_batch = min(2 * snap_batch, 256)  # can't certify progress; average harder
        y_in = anchor.copy()
        for _ in range(k_inner):
            rng_a, rng_b = _paired_rngs(stream)
            g_it = penalty_grads(problem, x, y_in, ll, act, cfg, rng_a)[1]
            g_anchor = penalty_grads(problem, x, anchor, ll, act, cfg, rng_b)[1]
            y_in = y_in - eta * (g_it - g_anchor + snap)
            calls += 2
            iterations += 1
        anchor = y_in
    return PenaltyMinResult(y=best_y, iterations=iterations, grad_norm=best_norm,
                            oracle_calls=calls)


# ---------------------------------------------------------------------------
# The oracle: lower-level solve -> activation -> penalty argmin -> N_g samples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PenaltyState:
    """Inner state of one oracle call; reusable as a warm start for a nearby x."""

    ll: LowerLevelSolution
    act: ActivationState
    y_tilde: Array
    pen_grad_norm: float
    iters_ll: int
    iters_pen: int
    oracle_calls: int


@dataclass(frozen=True)
class HypergradientEstimate:
    grad: Array
    n_samples: int
    sample_variance: float
    inner_iters_ll: int
    inner_iters_pen: int
    ll_residual: float
    pen_residual: float
    oracle_calls: int
    state: PenaltyState

    def __post_init__(self):
        if self.sample_variance < 0:
            raise ValueError("sample_variance must be nonnegative")

    def diagnostics_row(self, cfg: PenaltyConfig) -> dict:
        return {
            "alpha": cfg.alpha,
            "N_g": self.n_samples,
            "ll_residual": self.ll_residual,
            "penalty_residual": self.pen_residual,
            "sample_variance": self.sample_variance,
            "inner_iters_ll": self.inner_iters_ll,
            "inner_iters_pen": self.inner_iters_pen,
        }


def prepare_state(problem: BilevelProblem, x: Array, cfg: PenaltyConfig,
                  stream: np.random.Generator | None,
                  warm: PenaltyState | None = None,
                  spd_cfg: SpdConfig | None = None) -> PenaltyState:
    """Steps 1-3 of one oracle call: (y~*, lam~), rho, and the penalty argmin."""
    mu_g = problem.mu_g if problem.mu_g is not None else 1.0
    if spd_cfg is None:
        stochastic = problem.noise_sigma > 0 and stream is not None
        # Noisy solves are budget-capped (best iterate returned at the cap);
        # exact solves stop on the residual alone.
        spd_cfg = SpdConfig(tol=cfg.ll_tol_scale * mu_g * cfg.delta,
                            max_iters=1500 if stochastic else 200_000)
    ll = spd_solve(problem, x, spd_cfg, stream,
                   y0=warm.ll.y if warm is not None else None,
                   lam0=warm.ll.lam if warm is not None else None)
    act = build_activation(problem, x, ll, cfg)
    rho_before = act.rho.copy()
    pen = minimize_penalty(problem, x, ll, act, cfg, stream,
                           y0=warm.y_tilde if warm is not None else None)
    assert np.array_equal(act.rho, rho_before), "activation changed during penalty minimization"
    return PenaltyState(
        ll=ll,
        act=act,
        y_tilde=pen.y,
        pen_grad_norm=pen.grad_norm,
        iters_ll=ll.iterations,
        iters_pen=pen.iterations,
        oracle_calls=ll.iterations + pen.oracle_calls,
    )


def sample_grad_x(problem: BilevelProblem, x: Array, state: PenaltyState,
                  cfg: PenaltyConfig, stream: np.random.Generator | None) -> Array:
    """One stochastic sample of grad_x L at (x, y~) with the state held fixed."""
    return penalty_grads(problem, x, state.y_tilde, state.ll, state.act, cfg, stream)[0]


def hypergradient(problem: BilevelProblem, x: Array, cfg: PenaltyConfig,
                  stream: np.random.Generator | None,
                  warm: PenaltyState | None = None) -> HypergradientEstimate:
    """Full oracle: inner solves plus the average of N_g fresh x-partial samples.

    The averaging samples are drawn from independently split sub-streams and
    summed in sample order, so results are reproducible bit-for-bit given the
    stream. With noise_sigma = 0 the estimate is deterministic.
    """
    x = np.asarray(x, dtype=float)
    state = prepare_state(problem, x, cfg, stream, warm=warm)
    if problem.noise_sigma > 0 and stream is not None:
        subs = stream.spawn(cfg.N_g)
        samples = np.empty((cfg.N_g, problem.n))
        for j, sub in enumerate(subs):
            samples[j] = sample_grad_x(problem, x, state, cfg, sub)
        grad = samples.mean(axis=0)
        if cfg.N_g > 1:
            dev = samples - grad
            sample_variance = float((dev * dev).sum() / (cfg.N_g - 1))
        else:
            sample_variance = 0.0
        n_calls = state.oracle_calls + cfg.N_g
    else:
        grad = sample_grad_x(problem, x, state, cfg, None)
        sample_variance = 0.0
        n_calls = state.oracle_calls + 1
    return HypergradientEstimate(
        grad=grad,
        n_samples=cfg.N_g,
        sample_variance=sample_variance,
        inner_iters_ll=state.iters_ll,
        inner_iters_pen=state.iters_pen,
        ll_residual=state.ll.kkt_residual,
        pen_residual=state.pen_grad_norm,
        oracle_calls=n_calls,
        state=state,
    )
