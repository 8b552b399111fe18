"""Clipped nonsmooth outer loop with randomized interpolation and block averages.

One run maintains a displacement Delta with ||Delta|| <= D. Per iteration:
sample s_t ~ Unif[0,1], move x_t = x_{t-1} + Delta_t, query the hypergradient
oracle at the interpolated point z_t = x_{t-1} + s_t Delta_t, and update
Delta_{t+1} = clip_D(Delta_t - eta g_t). Iterations are grouped into K blocks
of M = floor(goldstein_delta / D): every z in block k stays within
M D <= goldstein_delta of the block average x_bar_k, so the block-averaged
oracle outputs upper-bound the distance to stationarity over the
goldstein_delta-ball (up to the oracle's O(alpha) bias). The output point is
drawn uniformly over the block averages.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SolverError
from .penalty import PenaltyConfig, hypergradient
from .problem import Array, BilevelProblem, project_upper


def clip(v: Array, D: float) -> Array:
    """Radial rescale to norm at most D; direction preserved, zero-safe."""
    if D <= 0:
        raise ValueError("D must be positive")
    v = np.asarray(v, dtype=float)
    nv = float(np.linalg.norm(v))
    if nv <= D:
        return v
    return (D / nv) * v


@dataclass(frozen=True)
class OuterConfig:
    """Clip radius D, step eta, budget T, and the Goldstein radius/target pair.

    Must satisfy M = floor(goldstein_delta / D) >= 1 and K = floor(T / M) >= 1;
    the ragged tail of iterations beyond K*M is dropped from the blocks.
    """

    D: float
    eta: float
    T: int
    goldstein_delta: float
    epsilon: float
    seed: int = 0
    x0: Array | None = None
    project_iterates: bool = True  # apply box projection to x_t (logged deviation)

    def __post_init__(self):
        if min(self.D, self.eta, self.goldstein_delta, self.epsilon) <= 0 or self.T < 1:
            raise ValueError("D, eta, goldstein_delta, epsilon must be positive and T >= 1")
        if self.M < 1:
            raise ValueError("floor(goldstein_delta / D) must be >= 1")
        if self.K < 1:
            raise ValueError("floor(T / M) must be >= 1")
        if self.x0 is not None:
            object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))

    @property
    def M(self) -> int:
        # guard against 100.0 landing at 99.999... in floating point
        return int(np.floor(self.goldstein_delta / self.D + 1e-9))

    @property
    def K(self) -> int:
        return self.T // self.M


@dataclass(frozen=True)
class CalibrationConstants:
    """Order-constants (all default 1) and activation parameters for calibrate."""

    c_D: float = 1.0
    c_eta: float = 1.0
    c_K: float = 1.0
    c_Ng: float = 1.0
    alpha_over_epsilon: float = 1.0
    tau_scale: float = 1.0
    eps_lambda: float = 1e-3


def calibrate(epsilon: float, goldstein_delta: float, L_F_estimate: float,
              sigma: float, F_gap_estimate: float,
              consts: CalibrationConstants = CalibrationConstants(),
              seed: int = 0, x0: Array | None = None) -> tuple[OuterConfig, PenaltyConfig]:
    """Parameter choices for a target (goldstein_delta, epsilon), unit constants.

        alpha = epsilon
        D     = goldstein_delta * epsilon^2 / L_F^2
        eta   = goldstein_delta * epsilon^3 / L_F^4
        M     = max(1, floor(goldstein_delta / D))
        N_g   = max(1, ceil(sigma^2 / alpha^2))
        K     = ceil(F_gap / (goldstein_delta * epsilon)),  T = K * M
    """
    if min(epsilon, goldstein_delta, L_F_estimate, F_gap_estimate) <= 0 or sigma < 0:
        raise ValueError("calibrate inputs must be positive (sigma >= 0)")
    alpha = consts.alpha_over_epsilon * epsilon
    D = consts.c_D * goldstein_delta * epsilon ** 2 / L_F_estimate ** 2
    eta = consts.c_eta * goldstein_delta * epsilon ** 3 / L_F_estimate ** 4
    M = max(1, int(np.floor(goldstein_delta / D + 1e-9)))
    N_g = max(1, int(np.ceil(consts.c_Ng * sigma ** 2 / alpha ** 2)))
    K = max(1, int(np.ceil(consts.c_K * F_gap_estimate / (goldstein_delta * epsilon))))
    T = K * M
    outer = OuterConfig(D=D, eta=eta, T=T, goldstein_delta=goldstein_delta,
                        epsilon=epsilon, seed=seed, x0=x0)
    pen = PenaltyConfig(alpha=alpha, tau_scale=consts.tau_scale,
                        eps_lambda=consts.eps_lambda, N_g=N_g)
    return outer, pen


@dataclass
class RunTrace:
    """Per-iteration and per-block record of one outer run.

    Timing columns (``elapsed``) are excluded from the determinism contract;
    everything else reproduces bit-exactly under a fixed seed.
    """

    T: int
    M: int
    K: int
    D: float
    goldstein_delta: float
    s: Array
    norm_delta: Array
    norm_g: Array
    f_true_vals: Array          # NaN where not instrumented
    oracle_calls: Array         # cumulative
    elapsed: Array
    x_rows: Array               # (T, n)
    z_rows: Array
    g_rows: Array
    block_x: Array              # (K, n)
    block_gap: Array            # (K,)
    x_out: Array
    out_block: int
    f0: float = float("nan")
    projected_steps: int = 0
    aborted: bool = False
    error: str = ""
    meta: dict = field(default_factory=dict)


class OuterLoopError(SolverError):
    """An inner-oracle failure aborted the run; the partial trace is attached."""

    def __init__(self, message: str, trace: RunTrace):
        super().__init__(message)
        self.trace = trace


def _finalize_blocks(trace: RunTrace, pick_stream: np.random.Generator, upto: int) -> None:
    M, n = trace.M, trace.x_rows.shape[1]
    K = min(trace.K, upto // M)
    block_x = np.zeros((K, n))
    block_gap = np.zeros(K)
    for k in range(K):
        sl = slice(k * M, (k + 1) * M)
        block_x[k] = trace.z_rows[sl].mean(axis=0)
        block_gap[k] = float(np.linalg.norm(trace.g_rows[sl].mean(axis=0)))
    trace.block_x = block_x
    trace.block_gap = block_gap
    if K > 0:
        trace.out_block = int(pick_stream.integers(K))
        trace.x_out = block_x[trace.out_block].copy()
    else:
        trace.out_block = -1
        trace.x_out = trace.x_rows[max(upto - 1, 0)].copy() if upto else trace.x_rows[0] * np.nan


def run(problem: BilevelProblem, outer_cfg: OuterConfig, penalty_cfg: PenaltyConfig,
        stream: np.random.Generator, f_true=None, instrument_stride: int = 0) -> RunTrace:
    """Execute the loop; raises OuterLoopError (partial trace attached) on
    inner-solver failure.

    ``f_true``: optional callable x -> float recorded every
    ``instrument_stride`` iterations (plus the first and last) and at x0.
    Three independent sub-streams drive s_t, the oracle, and the output draw.
    """
    T, D, eta = outer_cfg.T, outer_cfg.D, outer_cfg.eta
    n = problem.n
    s_stream, oracle_stream, pick_stream = stream.spawn(3)
    x = np.zeros(n) if outer_cfg.x0 is None else outer_cfg.x0.copy()
    if outer_cfg.x0 is not None and outer_cfg.x0.shape != (n,):
        raise ValueError("x0 has wrong dimension")
    delta = np.zeros(n)
    trace = RunTrace(
        T=T, M=outer_cfg.M, K=outer_cfg.K, D=D, goldstein_delta=outer_cfg.goldstein_delta,
        s=np.zeros(T), norm_delta=np.zeros(T), norm_g=np.zeros(T),
        f_true_vals=np.full(T, np.nan), oracle_calls=np.zeros(T), elapsed=np.zeros(T),
        x_rows=np.zeros((T, n)), z_rows=np.zeros((T, n)), g_rows=np.zeros((T, n)),
        block_x=np.zeros((0, n)), block_gap=np.zeros(0), x_out=np.zeros(n), out_block=-1,
    )
    if f_true is not None:
        trace.f0 = float(f_true(x))
    is_box = problem.upper_set.kind == "box"
    warm = None
    calls = 0
    t0 = time.perf_counter()
    for t in range(T):
        s_t = float(s_stream.uniform())
        x_next = x + delta
        if is_box and outer_cfg.project_iterates:
            x_proj = project_upper(problem.upper_set, x_next)
            if not np.array_equal(x_proj, x_next):
                trace.projected_steps += 1
            x_next = x_proj
        z_t = x + s_t * delta
        try:
            est = hypergradient(problem, z_t, penalty_cfg, oracle_stream, warm=warm)
        except SolverError as exc:
            trace.aborted = True
            trace.error = str(exc)
            for name in ("s", "norm_delta", "norm_g", "f_true_vals", "oracle_calls", "elapsed"):
                setattr(trace, name, getattr(trace, name)[:t])
            for name in ("x_rows", "z_rows", "g_rows"):
                setattr(trace, name, getattr(trace, name)[:t])
            _finalize_blocks(trace, pick_stream, upto=t)
            raise OuterLoopError(f"outer loop aborted at t={t + 1}: {exc}", trace) from exc
        warm = est.state
        g_t = est.grad
        calls += est.oracle_calls
        trace.s[t] = s_t
        trace.norm_delta[t] = float(np.linalg.norm(delta))
        trace.norm_g[t] = float(np.linalg.norm(g_t))
        trace.x_rows[t] = x_next
        trace.z_rows[t] = z_t
        trace.g_rows[t] = g_t
        trace.oracle_calls[t] = calls
        trace.elapsed[t] = time.perf_counter() - t0
        if f_true is not None and instrument_stride > 0 and (
                (t + 1) % instrument_stride == 0 or t == 0 or t == T - 1):
            trace.f_true_vals[t] = float(f_true(x_next))
        delta = clip(delta - eta * g_t, D)
        x = x_next
    _finalize_blocks(trace, pick_stream, upto=T)
    return trace


def goldstein_gap_estimate(trace: RunTrace, k: int) -> float:
    """Norm of the block-k average of the oracle outputs.

    Upper-bound surrogate for the distance from 0 to the Goldstein
    subdifferential at x_bar_k, up to the oracle bias: the averaged gradients
    belong to the subdifferential because every z in the block lies within
    goldstein_delta of x_bar_k.
    """
    if not (0 <= k < trace.K):
        raise IndexError(f"block index {k} out of range [0, {trace.K})")
    sl = slice(k * trace.M, (k + 1) * trace.M)
    return float(np.linalg.norm(trace.g_rows[sl].mean(axis=0)))


def smoothed_block_gaps(trace: RunTrace, window: int = 5) -> Array:
    """Running mean of the block gap series over trailing windows."""
    gaps = trace.block_gap
    if gaps.size == 0:
        return gaps
    out = np.empty_like(gaps)
    for k in range(gaps.size):
        lo = max(0, k - window + 1)
        out[k] = gaps[lo:k + 1].mean()
    return out
