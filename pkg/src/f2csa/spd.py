"""Stochastic primal-dual (SPD) solver for the constrained lower level.

Alternates a (possibly noisy) gradient step on y with a projected ascent step
on the multipliers of h(x, y) = A x - B y - b <= 0:

    y   <- y - eta_y (grad_y g(x, y; zeta) - B' lam)
    lam <- max(0, lam + eta_lam (A x - B y - b))

Stationarity of the lower-level Lagrangian g + lam'h reads
grad_y g - B' lam = 0 (the sign follows from grad_y h = -B), and the dual
step ascends lam' h. Stopping is on the computable KKT residual
max(stationarity, violation, complementarity); for mu_g-strongly-convex g a
residual below mu_g * delta implies ||y - y*|| <= delta, which is how target
distances translate into tolerances everywhere downstream.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from .errors import DivergenceError, LicqError
from .problem import (
    Array,
    BilevelProblem,
    LowerLevelSolution,
    constraint_values,
    kkt_terms,
)


@dataclass(frozen=True)
class SpdConfig:
    """Step sizes, target residual and iteration budget for one SPD solve.

    ``eta_y`` defaults to 1/(2 C_g) and ``eta_lambda`` to mu_g/(2 ||B||^2);
    with those defaults eta_y <= 1/(C_g + ||B||^2 eta_lambda) always holds.
    ``averaging`` selects the returned iterate: the last one (exact gradients)
    or the average over the trailing quarter of the run (noisy gradients);
    "auto" picks per the noise level. ``batch_size=None`` sizes the
    per-step gradient mini-batch from (sigma, mu_g, tol).
    """

    tol: float
    eta_y: float | None = None
    eta_lambda: float | None = None
    max_iters: int = 200_000
    averaging: str = "auto"  # "last_iterate" | "tail_average" | "auto"
    batch_size: int | None = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("eta_y", "eta_lambda"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive")
        if self.averaging not in ("auto", "last_iterate", "tail_average"):
            raise ValueError(f"unknown averaging mode {self.averaging!r}")


def _estimate_curvature(problem: BilevelProblem, x: Array) -> tuple[float, float]:
    """(mu_g, C_g) estimates by finite-difference power iteration on grad_y g.

    Used only when the problem does not carry the constants; the smallest
    Rayleigh quotient over random directions is an optimistic mu_g bound, so a
    0.5 safety factor is applied.
    """
    rng = np.random.default_rng(0)
    m = problem.m
    y0 = np.zeros(m)
    eps = 1e-6
    _, g0 = problem.grad_g(x, y0, None)

    def hv(v: Array) -> Array:
        _, g1 = problem.grad_g(x, y0 + eps * v, None)
        return (g1 - g0) / eps

    v = rng.standard_normal(m)
    v /= np.linalg.norm(v)
    lam_max = 1.0
    for _ in range(30):
        w = hv(v)
        lam_max = float(np.linalg.norm(w))
        if lam_max == 0:
            break
        v = w / lam_max
    rayleighs = []
    for _ in range(2 * m):
        u = rng.standard_normal(m)
        u /= np.linalg.norm(u)
        rayleighs.append(float(u @ hv(u)))
    mu = 0.5 * max(min(rayleighs), 1e-12)
    warnings.warn(
        "lower-level curvature constants not provided; using finite-difference "
        f"estimates mu_g~{mu:.3g}, C_g~{lam_max:.3g}",
        stacklevel=3,
    )
    return mu, max(lam_max, mu)


_BATCH_CAP = 128


def _auto_batch(sigma: float, mu: float, tol: float, cap: int = _BATCH_CAP) -> int:
    if sigma <= 0:
        return 1
    b = math.ceil((sigma / (0.5 * mu * tol)) ** 2)
    return int(min(max(b, 2), cap))


def spd_solve(problem: BilevelProblem, x: Array, cfg: SpdConfig,
              stream: np.random.Generator | None = None,
              y0: Array | None = None, lam0: Array | None = None,
              log_rows: list | None = None) -> LowerLevelSolution:
    """Run SPD to KKT residual <= cfg.tol; returns the best iterate at the cap.

    Raises DivergenceError if the residual grows a factor
    ``cfg.divergence_factor`` above its initial value. When ``log_rows`` is a
    list, one (iter, residual, ||y||, ||lam||) tuple is appended per iteration.
    """
    x = np.asarray(x, dtype=float)
    c = problem.constraints
    mu = problem.mu_g
    C_g = problem.smooth_g
    if mu is None or C_g is None:
        mu_est, cg_est = _estimate_curvature(problem, x)
        mu = mu if mu is not None else mu_est
        C_g = C_g if C_g is not None else cg_est
    eta_y = cfg.eta_y if cfg.eta_y is not None else 1.0 / (2.0 * C_g)
    if c.p > 0 and c.norm_B > 0:
        eta_lam = cfg.eta_lambda if cfg.eta_lambda is not None else mu / (2.0 * c.norm_B ** 2)
    else:
        eta_lam = 0.0

    stochastic = problem.noise_sigma > 0 and stream is not None
    batch = cfg.batch_size or (_auto_batch(problem.noise_sigma, mu, cfg.tol) if stochastic else 1)
    tail = cfg.averaging == "tail_average" or (cfg.averaging == "auto" and stochastic)

    y = np.zeros(problem.m) if y0 is None else np.asarray(y0, dtype=float).copy()
    lam = np.zeros(c.p) if lam0 is None else np.maximum(np.asarray(lam0, dtype=float), 0.0)

    def grad_y_at(yv: Array, nsamples: int) -> tuple[Array, float]:
        """Batched gradient estimate and its measurement floor (scatter/sqrt(B))."""
        if not stochastic:
            return problem.grad_g(x, yv, None)[1], 0.0
        if nsamples == 1:
            return problem.grad_g(x, yv, stream)[1], 0.0
        samples = np.empty((nsamples, problem.m))
        for j in range(nsamples):
            samples[j] = problem.grad_g(x, yv, stream)[1]
        mean = samples.mean(axis=0)
        scatter = float(np.sqrt(((samples - mean) ** 2).sum(axis=1).mean()))
        return mean, scatter / np.sqrt(nsamples)

    def residual(yv: Array, lamv: Array, gy: Array) -> float:
        stat, viol, comp = kkt_terms(problem, x, yv, lamv, grad_g_y=gy)
        return max(stat, viol, comp)

    ys_hist: list[Array] = []
    lam_hist: list[Array] = []
    best_res = np.inf
    best = (y.copy(), lam.copy())
    res0 = None

    gy, floor = grad_y_at(y, batch)
    if stochastic and cfg.batch_size is None and floor > 0:
        # The initial rule only knows the per-entry sigma; re-size the batch
        # from the measured gradient-vector scatter so the floor sits under tol.
        scatter = floor * np.sqrt(batch)
        batch = int(np.clip(math.ceil((2.0 * scatter / cfg.tol) ** 2), batch, 128))
    for it in range(cfg.max_iters + 1):
        res = residual(y, lam, gy)
        if log_rows is not None:
            log_rows.append((it, res, float(np.linalg.norm(y)), float(np.linalg.norm(lam))))
        if res0 is None:
            res0 = max(res, 1e-12)
        if res < best_res:
            best_res, best = res, (y.copy(), lam.copy())
        # Noisy runs cannot certify below the measurement floor; stop there
        # and report the achieved (estimated) residual.
        if res <= max(cfg.tol, 1.5 * floor):
            return LowerLevelSolution(y=y, lam=lam, kkt_residual=res, iterations=it)
        if res > cfg.divergence_factor * res0 and it > 10:
            raise DivergenceError(
                f"SPD divergence: reduce steps (residual {res:.3e} vs initial {res0:.3e})",
                best_residual=best_res,
            )
        if it == cfg.max_iters:
            break
        y = y - eta_y * (gy - (c.B.T @ lam if c.p else 0.0))
        if c.p:
            lam = np.maximum(0.0, lam + eta_lam * constraint_values(c, x, y))
        if tail:
            ys_hist.append(y.copy())
            lam_hist.append(lam.copy())
            if (it + 1) % 10 == 0:
                w = max(1, (it + 1) // 4)
                y_bar = np.mean(ys_hist[-w:], axis=0)
                lam_bar = np.mean(lam_hist[-w:], axis=0)
                gy_bar, floor_bar = grad_y_at(y_bar, 2 * batch)
                res_bar = residual(y_bar, lam_bar, gy_bar)
                if res_bar < best_res:
                    best_res, best = res_bar, (y_bar, lam_bar)
                if res_bar <= max(cfg.tol, 1.5 * floor_bar):
                    return LowerLevelSolution(y=y_bar, lam=lam_bar, kkt_residual=res_bar,
                                              iterations=it + 1)
        gy, floor = grad_y_at(y, batch)

    y_best, lam_best = best
    return LowerLevelSolution(y=y_best, lam=lam_best, kkt_residual=float(best_res),
                              iterations=cfg.max_iters)


def estimate_duals_from_primal(problem: BilevelProblem, x: Array, y: Array,
                               active_tol: float) -> Array:
    """Least-squares multipliers on near-active rows (fallback extraction).

    Solves min ||grad_y g(x,y) - B'lam|| over lam >= 0 supported on rows with
    h_i >= -active_tol, zero elsewhere. Raises LicqError when the supporting
    rows of B are rank deficient.
    """
    c = problem.constraints
    lam = np.zeros(c.p)
    if c.p == 0:
        return lam
    h = constraint_values(c, x, y)
    support = np.flatnonzero(h >= -active_tol)
    if support.size == 0:
        return lam
    B_sup = c.B[support]
    if np.linalg.matrix_rank(B_sup) < support.size:
        raise LicqError(
            f"LICQ violation suspected: {support.size} near-active rows with rank "
            f"{np.linalg.matrix_rank(B_sup)}"
        )
    _, gy = problem.grad_g(x, y, None)
    sol, _ = nnls(B_sup.T, gy)
    lam[support] = sol
    return lam
