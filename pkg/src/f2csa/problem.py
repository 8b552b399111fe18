"""Constrained stochastic bilevel problem abstraction.

The upper level minimizes F(x) = E[f(x, y*(x); xi)] over x in an upper-level
set (free or box), where y*(x) solves the lower-level problem

    min_y E[g(x, y; zeta)]   s.t.   h(x, y) = A x - B y - b <= 0.

Everything downstream (inner solvers, penalty oracle, outer loop) consumes
problems through this module's types. Oracles are plain callables taking an
explicit numpy Generator; passing ``rng=None`` evaluates the noiseless
(expected) quantity. No hidden RNG state anywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

Array = np.ndarray

# (x, y, rng) -> (grad_x, grad_y); rng=None means the deterministic gradient.
GradOracle = Callable[[Array, Array, "np.random.Generator | None"], tuple[Array, Array]]
# (x, y, rng) -> scalar
ValueOracle = Callable[[Array, Array, "np.random.Generator | None"], float]


def _vector(v, size: int, name: str) -> Array:
    a = np.asarray(v, dtype=float).reshape(-1)
    if a.shape != (size,):
        raise ValueError(f"{name}: expected shape ({size},), got {a.shape}")
    return a


@dataclass(frozen=True)
class LinearConstraints:
    """Coupled linear inequalities A x - B y - b <= 0.

    A is p x n, B is p x m, b has length p. p = 0 means the lower level is
    unconstrained. Operator norms of A and B are computed once at
    construction and reused by step-size rules.
    """

    A: Array
    B: Array
    b: Array
    norm_A: float = field(init=False)
    norm_B: float = field(init=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        b = np.asarray(self.b, dtype=float).reshape(-1)
        p = b.shape[0]
        if p == 0:
            A = A.reshape(0, A.shape[1] if A.size else 0)
            B = B.reshape(0, B.shape[1] if B.size else 0)
        if A.shape[0] != p or B.shape[0] != p:
            raise ValueError(
                f"inconsistent constraint rows: A has {A.shape[0]}, B has {B.shape[0]}, b has {p}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "norm_A", float(np.linalg.norm(A, 2)) if A.size else 0.0)
        object.__setattr__(self, "norm_B", float(np.linalg.norm(B, 2)) if B.size else 0.0)
        if not (np.isfinite(self.norm_A) and np.isfinite(self.norm_B)):
            raise ValueError("constraint matrices must have finite norms")

    @property
    def p(self) -> int:
        return self.b.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m(self) -> int:
        return self.B.shape[1]


def box_constraints(m: int, n: int, radius: float = 1.0) -> LinearConstraints:
    """Encode y in [-radius, radius]^m as 2m rows: B = [-I; I], b = radius."""
    eye = np.eye(m)
    return LinearConstraints(
        A=np.zeros((2 * m, n)),
        B=np.vstack([-eye, eye]),
        b=np.full(2 * m, float(radius)),
    )


def constraint_values(c: LinearConstraints, x: Array, y: Array) -> Array:
    """h(x, y) = A x - B y - b. Affine in both arguments; empty when p = 0."""
    x = _vector(x, c.n, "x") if c.p else np.asarray(x, dtype=float)
    y = _vector(y, c.m, "y") if c.p else np.asarray(y, dtype=float)
    if c.p == 0:
        return np.zeros(0)
    return c.A @ x - c.B @ y - c.b


@dataclass(frozen=True)
class UpperSet:
    """Feasible set for x: all of R^n or a coordinate box."""

    kind: str  # "free" | "box"
    lo: Array | None = None
    hi: Array | None = None

    @staticmethod
    def free() -> "UpperSet":
        return UpperSet(kind="free")

    @staticmethod
    def box(lo, hi) -> "UpperSet":
        lo = np.asarray(lo, dtype=float).reshape(-1)
        hi = np.asarray(hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ValueError("box bounds must satisfy lo <= hi componentwise")
        return UpperSet(kind="box", lo=lo, hi=hi)


def project_upper(upper_set: UpperSet, x: Array) -> Array:
    """Euclidean projection onto the upper-level set (identity when free)."""
    x = np.asarray(x, dtype=float)
    if upper_set.kind == "free":
        return x
    if upper_set.kind == "box":
        return np.clip(x, upper_set.lo, upper_set.hi)
    raise ValueError(f"unknown upper set kind: {upper_set.kind!r}")


@dataclass(frozen=True)
class BilevelProblem:
    """Stochastic first-order view of one bilevel problem.

    Oracles return a single unbiased sample when given a Generator, and the
    exact expectation when given None. Instances are immutable and safe to
    share across workers; each worker owns its own streams.

    ``mu_g`` / ``smooth_g`` are the strong-convexity and smoothness constants
    of g(x, .) when known (always known for generated quadratics); solvers
    estimate them by finite differences otherwise. ``hess_f_yy`` /
    ``hess_g_yy`` are constant y-block Hessians when the objectives are
    quadratic, letting the penalty minimizer assemble its curvature exactly.
    """

    n: int
    m: int
    constraints: LinearConstraints
    grad_f: GradOracle
    grad_g: GradOracle
    value_f: ValueOracle
    value_g: ValueOracle
    upper_set: UpperSet
    noise_sigma: float
    mu_g: float | None = None
    smooth_g: float | None = None
    hess_f_yy: Array | None = None
    hess_g_yy: Array | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.constraints.p > 0:
            if self.constraints.n != self.n or self.constraints.m != self.m:
                raise ValueError("constraint dimensions do not match problem dimensions")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")

    @property
    def p(self) -> int:
        return self.constraints.p

    def with_sigma(self, noise_sigma: float) -> "BilevelProblem":
        return replace(self, noise_sigma=float(noise_sigma))


def sample_gradients(problem: BilevelProblem, x: Array, y: Array, stream: np.random.Generator):
    """One stochastic sample of (grad f, grad g) at (x, y).

    Returns ((fx, fy), (gx, gy)). Unbiased with variance bounded by the
    problem's noise model; deterministic given the stream state.
    """
    gf = problem.grad_f(x, y, stream)
    gg = problem.grad_g(x, y, stream)
    for (gx, gy) in (gf, gg):
        if np.shape(gx) != (problem.n,) or np.shape(gy) != (problem.m,):
            raise ValueError("oracle output dimensions do not match the problem")
    return gf, gg


@dataclass(frozen=True)
class LowerLevelSolution:
    """Approximate primal-dual pair for the lower level at a fixed x.

    ``kkt_residual`` is max(stationarity norm, primal violation,
    complementarity), the computable surrogate used for all stopping rules.
    """

    y: Array
    lam: Array
    kkt_residual: float
    iterations: int = 0

    def __post_init__(self):
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float))
        object.__setattr__(self, "lam", np.asarray(self.lam, dtype=float))
        if self.lam.size and float(self.lam.min()) < 0:
            raise ValueError("multipliers must be nonnegative")


def kkt_terms(problem: BilevelProblem, x: Array, y: Array, lam: Array,
              grad_g_y: Array | None = None) -> tuple[float, float, float]:
    """(stationarity norm, primal violation, complementarity) at (y, lam).

    Stationarity is ||grad_y g(x,y) - B^T lam||; the deterministic gradient is
    used unless a (possibly sampled) grad_g_y is supplied.
    """
    c = problem.constraints
    if grad_g_y is None:
        _, grad_g_y = problem.grad_g(x, y, None)
    if c.p == 0:
        return float(np.linalg.norm(grad_g_y)), 0.0, 0.0
    h = constraint_values(c, x, y)
    stat = float(np.linalg.norm(grad_g_y - c.B.T @ lam))
    viol = float(max(0.0, h.max())) if h.size else 0.0
    comp = float(np.abs(lam * h).max()) if h.size else 0.0
    return stat, viol, comp


def kkt_residual(problem: BilevelProblem, x: Array, y: Array, lam: Array,
                 grad_g_y: Array | None = None) -> float:
    return max(kkt_terms(problem, x, y, lam, grad_g_y))


# ---------------------------------------------------------------------------
# Serialization. Problems round-trip through a JSON document; oracle callables
# are reconstructed from (instance_kind, seed) by a registered loader.
# ---------------------------------------------------------------------------

_INSTANCE_LOADERS: dict[str, Callable[[dict], BilevelProblem]] = {}


def register_instance_kind(kind: str, loader: Callable[[dict], BilevelProblem]) -> None:
    _INSTANCE_LOADERS[kind] = loader


def problem_to_dict(problem: BilevelProblem) -> dict:
    c = problem.constraints
    upper = {"kind": problem.upper_set.kind}
    if problem.upper_set.kind == "box":
        upper["lo"] = problem.upper_set.lo.tolist()
        upper["hi"] = problem.upper_set.hi.tolist()
    return {
        "n": problem.n,
        "m": problem.m,
        "p": c.p,
        "A": c.A.reshape(-1).tolist(),  # row-major
        "B": c.B.reshape(-1).tolist(),
        "b": c.b.tolist(),
        "upper_set": upper,
        "noise_sigma": problem.noise_sigma,
        "instance_kind": problem.meta.get("instance_kind", "custom"),
        "seed": problem.meta.get("seed"),
    }


def problem_from_dict(doc: dict) -> BilevelProblem:
    kind = doc.get("instance_kind", "custom")
    loader = _INSTANCE_LOADERS.get(kind)
    if loader is None:
        raise ValueError(
            f"cannot rebuild oracles for instance_kind {kind!r}; no loader registered"
        )
    problem = loader(doc)
    # The stored matrices are authoritative; regeneration must agree.
    c = problem.constraints
    for name, stored, built in (
        ("A", doc["A"], c.A.reshape(-1)),
        ("B", doc["B"], c.B.reshape(-1)),
        ("b", doc["b"], c.b),
    ):
        if not np.allclose(np.asarray(stored), built, atol=0, rtol=0):
            raise ValueError(f"stored constraint block {name} disagrees with regenerated instance")
    return problem


def save_problem(problem: BilevelProblem, path) -> None:
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem), fh, sort_keys=True)


def load_problem(path) -> BilevelProblem:
    with open(path) as fh:
        return problem_from_dict(json.load(fh))


def instance_hash(problem: BilevelProblem) -> str:
    """Stable hex digest identifying the problem data (not its oracles)."""
    c = problem.constraints
    h = hashlib.sha256()
    head = {
        "n": problem.n,
        "m": problem.m,
        "p": c.p,
        "noise_sigma": problem.noise_sigma,
        "instance_kind": problem.meta.get("instance_kind", "custom"),
        "seed": problem.meta.get("seed"),
        "upper": problem.upper_set.kind,
    }
    h.update(json.dumps(head, sort_keys=True).encode())
    for block in (c.A, c.B, c.b):
        h.update(np.ascontiguousarray(block).tobytes())
    return h.hexdigest()[:16]
