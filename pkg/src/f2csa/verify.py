"""Statistical probes for the oracle's bias/variance claims, plus the
implicit-gradient baseline used for method comparisons.

Probe protocol: the inner pipeline (lower-level solve, activation, penalty
argmin) runs once per cell on a dedicated stream, and the cell's trials then
draw fresh N_g-sample averages against that fixed inner state. That matches
the conditional structure of the variance statement (variance given the inner
solutions) and makes the 1/N_g scaling measurable without inner-path noise.
Bias is measured against the exact KKT-sensitivity hypergradient, at points
whose active set passes a strictness margin.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateActiveSetError
from .penalty import PenaltyConfig, prepare_state, sample_grad_x
from .problem import Array, BilevelProblem, LowerLevelSolution
from .quadratics import QuadraticInstance, active_coordinate_sets, exact_hypergradient
from .spd import SpdConfig, spd_solve


@dataclass(frozen=True)
class ProbeCell:
    alpha: float
    N_g: int
    trials: int
    bias_norm: float
    variance: float              # trace variance of the N_g-averaged estimate
    single_sample_variance: float
    mse: float                   # mean of ||estimate - exact||^2 over trials

    def as_dict(self) -> dict:
        return {
            "alpha": self.alpha, "N_g": self.N_g, "trials": self.trials,
            "bias_norm": self.bias_norm, "variance": self.variance,
            "single_sample_variance": self.single_sample_variance, "mse": self.mse,
        }


@dataclass
class BiasVarianceReport:
    alpha_grid: list[float]
    cells: list[ProbeCell]
    bias_slope: float = float("nan")
    variance_ratios: dict = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "alpha_grid": list(self.alpha_grid),
            "cells": [c.as_dict() for c in self.cells],
            "bias_slope": self.bias_slope,
            "variance_ratios": {str(k): v for k, v in self.variance_ratios.items()},
            "notes": list(self.notes),
        }


def strict_active_margin(inst: QuadraticInstance, ll: LowerLevelSolution, x: Array) -> float:
    """min over rows of max(|h_i|, lambda_i): small means a weakly active row."""
    y = ll.y
    h = np.concatenate([y - 1.0, -y - 1.0])
    return float(np.maximum(np.abs(h), ll.lam).min())


def probe_cell(problem: BilevelProblem, x: Array, exact: Array, cfg: PenaltyConfig,
               trials: int, stream: np.random.Generator) -> ProbeCell:
    """One (alpha, N_g) cell: single inner solve, then `trials` fresh averages."""
    state = prepare_state(problem, x, cfg, stream)
    n = problem.n
    stochastic = problem.noise_sigma > 0
    if not stochastic:
        g = sample_grad_x(problem, x, state, cfg, None)
        bias = float(np.linalg.norm(g - exact))
        return ProbeCell(alpha=cfg.alpha, N_g=cfg.N_g, trials=1, bias_norm=bias,
                         variance=0.0, single_sample_variance=0.0, mse=bias ** 2)
    means = np.empty((trials, n))
    singles = np.empty((trials, n))
    for t in range(trials):
        subs = stream.spawn(cfg.N_g)
        acc = np.zeros(n)
        for j, sub in enumerate(subs):
            s = sample_grad_x(problem, x, state, cfg, sub)
            if j == 0:
                singles[t] = s
            acc += s
        means[t] = acc / cfg.N_g
    grand = means.mean(axis=0)
    bias = float(np.linalg.norm(grand - exact))
    dev = means - grand
    variance = float((dev * dev).sum() / max(trials - 1, 1))
    sdev = singles - singles.mean(axis=0)
    single_var = float((sdev * sdev).sum() / max(trials - 1, 1))
    mse = float(((means - exact) ** 2).sum(axis=1).mean())
    return ProbeCell(alpha=cfg.alpha, N_g=cfg.N_g, trials=trials, bias_norm=bias,
                     variance=variance, single_sample_variance=single_var, mse=mse)


def fit_loglog_slope(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    keep = (xs > 0) & (ys > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(xs[keep]), np.log(ys[keep]), 1)[0])


DEFAULT_ALPHA_GRID = (0.4, 0.2, 0.1, 0.05)
STRICTNESS_MARGIN = 1e-4


def bias_probe(inst: QuadraticInstance, x: Array, alpha_grid=DEFAULT_ALPHA_GRID,
               trials: int = 200, stream: np.random.Generator | None = None,
               N_g: int = 1) -> BiasVarianceReport:
    """Oracle-vs-exact bias across an alpha grid, with the fitted log-log slope.

    Points whose active set fails the strictness margin are skipped with a
    note (the exact hypergradient is undefined there).
    """
    x = np.asarray(x, dtype=float)
    if inst.noise_sigma > 0 and trials < 30:
        raise ValueError("noisy probes need trials >= 30 per cell")
    stream = stream if stream is not None else np.random.default_rng(0)
    report = BiasVarianceReport(alpha_grid=list(alpha_grid), cells=[])
    try:
        exact = exact_hypergradient(inst, x, tol=STRICTNESS_MARGIN)
    except DegenerateActiveSetError as exc:
        report.notes.append(f"skipped x: {exc}")
        return report
    problem = inst.problem()
    trials_eff = trials if inst.noise_sigma > 0 else 1
    for alpha in alpha_grid:
        cfg = PenaltyConfig(alpha=float(alpha), N_g=N_g)
        report.cells.append(probe_cell(problem, x, exact, cfg, trials_eff, stream))
    report.bias_slope = fit_loglog_slope([c.alpha for c in report.cells],
                                         [c.bias_norm for c in report.cells])
    return report


def variance_probe(inst: QuadraticInstance, x: Array, alpha: float,
                   N_g_list=(16, 64, 256), trials: int = 200,
                   stream: np.random.Generator | None = None) -> BiasVarianceReport:
    """Trace variance of the estimate per N_g plus var(N_g)/var(4 N_g) ratios."""
    if inst.noise_sigma <= 0:
        raise ValueError("variance_probe requires a noisy instance (sigma > 0)")
    if trials < 30:
        raise ValueError("noisy probes need trials >= 30 per cell")
    x = np.asarray(x, dtype=float)
    stream = stream if stream is not None else np.random.default_rng(0)
    exact = exact_hypergradient(inst, x, tol=STRICTNESS_MARGIN)
    problem = inst.problem()
    report = BiasVarianceReport(alpha_grid=[alpha], cells=[])
    for ng in N_g_list:
        cfg = PenaltyConfig(alpha=float(alpha), N_g=int(ng))
        report.cells.append(probe_cell(problem, x, exact, cfg, trials, stream))
    by_ng = {c.N_g: c.variance for c in report.cells}
    for ng in N_g_list:
        if 4 * ng in by_ng and by_ng[4 * ng] > 0:
            report.variance_ratios[(ng, 4 * ng)] = by_ng[ng] / by_ng[4 * ng]
    return report


@dataclass(frozen=True)
class MseCheckResult:
    passed: bool
    c_bias_hat: float
    sigma2_hat: float
    worst_ratio: float
    per_cell: list[dict]


def mse_check(cells: list[ProbeCell], slack: float = 1.25) -> MseCheckResult:
    """Verify MSE <= slack * (2 C^2 alpha^2 + 2 sigma^2 / N_g) on every cell.

    C is the largest fitted bias constant (bias/alpha) over the cells and
    sigma^2 the largest empirical single-sample variance.
    """
    if not cells:
        raise ValueError("no probe cells")
    c_hat = max(c.bias_norm / c.alpha for c in cells)
    sigma2_hat = max(c.single_sample_variance for c in cells)
    rows = []
    worst = 0.0
    for c in cells:
        bound = 2.0 * c_hat ** 2 * c.alpha ** 2 + 2.0 * sigma2_hat / c.N_g
        ratio = c.mse / bound if bound > 0 else (0.0 if c.mse == 0 else np.inf)
        worst = max(worst, ratio)
        rows.append({"alpha": c.alpha, "N_g": c.N_g, "mse": c.mse, "bound": bound, "ratio": ratio})
    return MseCheckResult(passed=bool(worst <= slack), c_bias_hat=c_hat,
                          sigma2_hat=sigma2_hat, worst_ratio=worst, per_cell=rows)


# ---------------------------------------------------------------------------
# Implicit-gradient baseline (the Hessian-based competitor)
# ---------------------------------------------------------------------------

def implicit_gradient_baseline(inst: QuadraticInstance, x: Array, tol: float = 1e-6,
                               stream: np.random.Generator | None = None,
                               batch: int = 1,
                               ll: LowerLevelSolution | None = None,
                               strict: bool = True) -> Array:
    """Hypergradient via KKT sensitivity on the SPD lower-level solution.

    Same math as the exact oracle, but fed by stochastic gradient samples
    (averaged over ``batch``) and the inexact (y~, lam~); every call pays a
    dense linear solve on the free block of the lower-level Hessian. With
    sigma = 0 this coincides with the exact hypergradient up to solver
    tolerance.

    ``strict=True`` raises on weakly active rows (the verification contract);
    ``strict=False`` classifies by the multipliers alone (rows with small
    lambda are treated as inactive), which is what a practical descent run
    needs when the trajectory passes near a weakly active point.
    """
    x = np.asarray(x, dtype=float)
    problem = inst.problem()
    if ll is None:
        ll = spd_solve(problem, x, SpdConfig(tol=tol), stream)
    margin = max(10.0 * tol, 1e-8)
    if strict:
        clamped, free = active_coordinate_sets(inst, ll, x, margin)
    else:
        clamped = (ll.lam[: inst.m] > margin) | (ll.lam[inst.m:] > margin)
        free = ~clamped
    if stream is not None and inst.noise_sigma > 0:
        fx = np.zeros(inst.n)
        fy = np.zeros(inst.m)
        for _ in range(batch):
            sx, sy = inst.grad_f(x, ll.y, stream)
            fx += sx
            fy += sy
        fx /= batch
        fy /= batch
    else:
        fx, fy = inst.grad_f(x, ll.y, None)
    if not free.any():
        return fx
    Et = np.zeros((inst.m, inst.n))
    k = min(inst.n, inst.m)
    Et[:k, :k] = np.eye(k)
    J_free = -np.linalg.solve(inst.Q_l[np.ix_(free, free)], Et[free])
    return fx + J_free.T @ fy[free]
