"""Synthetic quadratic bilevel family with exact ground-truth oracles.

Upper level:  f(x, y) = 1/2 x'Qu x + cu'x + 1/2 y'Py y + x'P y
Lower level:  g(x, y) = 1/2 y'Ql y + cl'y + x'y,   y in [-1, 1]^m

The single quadratic coupling symbol of the construction is split into a cross
block P (n x m, enters x'P y) and a symmetric pure-y block Py (m x m); the
lower-level coupling x'y is realized as x'E y with E = eye(n, m) so that
rectangular (n != m) instances stay well defined (E is the identity when
n == m).

Stochastic oracles perturb the quadratic-term matrices with zero-mean Gaussian
noise, scaled by 1/(1 + ||x||) so the gradient-noise variance stays uniformly
bounded. Exact solvers here are the test oracles everything else is checked
against: a deterministic box-QP solver (projected gradient + active-set KKT
polish), the true objective F(x) = f(x, y*(x)), and the KKT-sensitivity
hypergradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import numpy as np

from .errors import DegenerateActiveSetError, SolverError
from .problem import (
    Array,
    BilevelProblem,
    LowerLevelSolution,
    UpperSet,
    box_constraints,
    constraint_values,
    register_instance_kind,
)


def _check_symmetric(M: Array, name: str) -> Array:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got {M.shape}")
    gap = float(np.abs(M - M.T).max()) if M.size else 0.0
    if gap > 1e-10 * (1.0 + float(np.abs(M).max() if M.size else 0.0)):
        raise ValueError(f"{name} is not symmetric (max asymmetry {gap:.2e})")
    return M


@dataclass(frozen=True)
class QuadraticInstance:
    """One generated problem; immutable, exact solvers are pure functions."""

    Q_u: Array
    Q_l: Array
    P: Array
    P_y: Array
    c_u: Array
    c_l: Array
    noise_sigma: float
    seed: int | None = None
    mu_g: float = field(init=False)      # smallest eigenvalue of Q_l
    C_g: float = field(init=False)       # largest eigenvalue of Q_l
    norm_Qu: float = field(init=False)
    norm_P: float = field(init=False)
    norm_Py: float = field(init=False)

    def __post_init__(self):
        Q_u = _check_symmetric(self.Q_u, "Q_u")
        Q_l = _check_symmetric(self.Q_l, "Q_l")
        P_y = _check_symmetric(self.P_y, "P_y")
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        c_u = np.asarray(self.c_u, dtype=float).reshape(-1)
        c_l = np.asarray(self.c_l, dtype=float).reshape(-1)
        n, m = c_u.shape[0], c_l.shape[0]
        if Q_u.shape != (n, n) or Q_l.shape != (m, m) or P.shape != (n, m) or P_y.shape != (m, m):
            raise ValueError("inconsistent block dimensions")
        evals = np.linalg.eigvalsh(Q_l)
        if evals[0] <= 0:
            raise ValueError(f"Q_l must be positive definite; lambda_min = {evals[0]:.3e}")
        for name, val in (("Q_u", Q_u), ("Q_l", Q_l), ("P", P), ("P_y", P_y), ("c_u", c_u), ("c_l", c_l)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "mu_g", float(evals[0]))
        object.__setattr__(self, "C_g", float(evals[-1]))
        object.__setattr__(self, "norm_Qu", float(np.linalg.norm(Q_u, 2)))
        object.__setattr__(self, "norm_P", float(np.linalg.norm(P, 2)) if P.size else 0.0)
        object.__setattr__(self, "norm_Py", float(np.linalg.norm(P_y, 2)))

    @property
    def n(self) -> int:
        return self.c_u.shape[0]

    @property
    def m(self) -> int:
        return self.c_l.shape[0]

    # -- coupling x'E y with E = eye(n, m) ---------------------------------
    def _k(self) -> int:
        return min(self.n, self.m)

    def couple_x_to_y(self, x: Array) -> Array:
        """E^T x: length-m vector."""
        out = np.zeros(self.m)
        k = self._k()
        out[:k] = x[:k]
        return out

    def couple_y_to_x(self, y: Array) -> Array:
        """E y: length-n vector."""
        out = np.zeros(self.n)
        k = self._k()
        out[:k] = y[:k]
        return out

    # -- oracles ------------------------------------------------------------
    def _noise_scale(self, x: Array) -> float:
        return self.noise_sigma / (1.0 + float(np.linalg.norm(x)))

    def value_f(self, x: Array, y: Array, rng: np.random.Generator | None = None) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        val = (0.5 * x @ (self.Q_u @ x) + self.c_u @ x
               + 0.5 * y @ (self.P_y @ y) + x @ (self.P @ y))
        if rng is not None and self.noise_sigma > 0:
            s = self._noise_scale(x)
            E_u = _sym_noise(rng, self.n, s)
            E_p = s * rng.standard_normal((self.n, self.m))
            E_py = _sym_noise(rng, self.m, s)
            val += 0.5 * x @ (E_u @ x) + 0.5 * y @ (E_py @ y) + x @ (E_p @ y)
        return float(val)

    def value_g(self, x: Array, y: Array, rng: np.random.Generator | None = None) -> float:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        val = 0.5 * y @ (self.Q_l @ y) + self.c_l @ y + self.couple_x_to_y(x) @ y
        if rng is not None and self.noise_sigma > 0:
            s = self._noise_scale(x)
            E_l = _sym_noise(rng, self.m, s)
            E_c = s * rng.standard_normal((self.n, self.m))
            val += 0.5 * y @ (E_l @ y) + x @ (E_c @ y)
        return float(val)

    def grad_f(self, x: Array, y: Array, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        fx = self.Q_u @ x + self.c_u + self.P @ y
        fy = self.P_y @ y + self.P.T @ x
        if rng is not None and self.noise_sigma > 0:
            s = self._noise_scale(x)
            E_u = _sym_noise(rng, self.n, s)
            E_p = s * rng.standard_normal((self.n, self.m))
            E_py = _sym_noise(rng, self.m, s)
            fx = fx + E_u @ x + E_p @ y
            fy = fy + E_py @ y + E_p.T @ x
        return fx, fy

    def grad_g(self, x: Array, y: Array, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gx = self.couple_y_to_x(y)
        gy = self.Q_l @ y + self.c_l + self.couple_x_to_y(x)
        if rng is not None and self.noise_sigma > 0:
            s = self._noise_scale(x)
            E_l = _sym_noise(rng, self.m, s)
            E_c = s * rng.standard_normal((self.n, self.m))
            gx = gx + E_c @ y
            gy = gy + E_l @ y + E_c.T @ x
        return gx, gy

    def problem(self, upper_set: UpperSet | None = None) -> BilevelProblem:
        """Wrap the instance as a BilevelProblem with box-encoded constraints."""
        return BilevelProblem(
            n=self.n,
            m=self.m,
            constraints=box_constraints(self.m, self.n),
            grad_f=self.grad_f,
            grad_g=self.grad_g,
            value_f=self.value_f,
            value_g=self.value_g,
            upper_set=upper_set if upper_set is not None else UpperSet.free(),
            noise_sigma=self.noise_sigma,
            mu_g=self.mu_g,
            smooth_g=self.C_g,
            hess_f_yy=self.P_y,
            hess_g_yy=self.Q_l,
            meta={"instance_kind": "quadratic_box", "seed": self.seed,
                  "norm_hess_f_yy": self.norm_Py},
        )


def _sym_noise(rng: np.random.Generator, k: int, scale: float) -> Array:
    G = rng.standard_normal((k, k))
    return scale * 0.5 * (G + G.T)


def _shift_to_pd(M: Array) -> Array:
    lam_min = float(np.linalg.eigvalsh(M)[0])
    return M + (abs(lam_min) + 1.0) * np.eye(M.shape[0])


def generate(n: int, m: int, seed: int, noise_sigma: float = 0.0) -> QuadraticInstance:
    """Draw one instance. Deterministic in (n, m, seed).

    Entries are i.i.d. N(0,1) scaled by 1/sqrt(dim) of the owning block so
    operator norms stay O(1) across dimensions; square quadratic blocks are
    symmetrized as (M + M')/2 and shifted by (|lambda_min| + 1) I, which
    floors their spectrum at 1 (mu_g >= 1 in particular, and keeps the upper
    objective bounded below so the bilevel value gap is finite). Constraints
    are the box y in [-1, 1]^m (p = 2m rows).
    """
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    rng = np.random.default_rng(seed)
    Q_u = rng.standard_normal((n, n)) / np.sqrt(n)
    Q_u = _shift_to_pd(0.5 * (Q_u + Q_u.T))
    Q_l = rng.standard_normal((m, m)) / np.sqrt(m)
    Q_l = _shift_to_pd(0.5 * (Q_l + Q_l.T))
    P = rng.standard_normal((n, m)) / np.sqrt(m)
    P_y = rng.standard_normal((m, m)) / np.sqrt(m)
    P_y = 0.5 * (P_y + P_y.T)
    c_u = rng.standard_normal(n) / np.sqrt(n)
    c_l = rng.standard_normal(m) / np.sqrt(m)
    return QuadraticInstance(Q_u=Q_u, Q_l=Q_l, P=P, P_y=P_y, c_u=c_u, c_l=c_l,
                             noise_sigma=float(noise_sigma), seed=int(seed))


def _load_quadratic_box(doc: dict) -> BilevelProblem:
    inst = generate(doc["n"], doc["m"], seed=doc["seed"], noise_sigma=doc["noise_sigma"])
    problem = inst.problem()
    upper = doc.get("upper_set", {"kind": "free"})
    if upper["kind"] == "box":
        problem = replace(problem, upper_set=UpperSet.box(upper["lo"], upper["hi"]))
    return problem


register_instance_kind("quadratic_box", _load_quadratic_box)


# ---------------------------------------------------------------------------
# Exact solvers (test oracles)
# ---------------------------------------------------------------------------

def _box_duals_from_residual(y: Array, r: Array, tol: float) -> Array:
    """Multipliers for the box rows [y <= 1; -y <= 1] from r = Ql y + q.

    Stationarity is r = B'lam with B = [-I; I], i.e. r = -lam_up + lam_lo.
    At an upper-active coordinate lam_up = -r, at a lower-active one
    lam_lo = r; small negative values are truncated to zero.
    """
    m = y.shape[0]
    lam = np.zeros(2 * m)
    at_up = y >= 1.0 - tol
    at_lo = y <= -1.0 + tol
    lam[:m][at_up] = np.maximum(0.0, -r[at_up])
    lam[m:][at_lo] = np.maximum(0.0, r[at_lo])
    return lam


def exact_lower_solve(inst: QuadraticInstance, x: Array, tol: float = 1e-10,
                      max_iters: int = 100_000) -> LowerLevelSolution:
    """Deterministic box-QP solve of the lower level to KKT residual <= tol.

    Projected gradient with exact step 1/lambda_max(Q_l) identifies the active
    set; an equality-constrained KKT polish on that set then drives the
    residual to machine level. Multipliers come from stationarity on the
    active rows and satisfy complementarity within tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = np.asarray(x, dtype=float)
    Q = inst.Q_l
    q = inst.c_l + inst.couple_x_to_y(x)
    m = inst.m
    step = 1.0 / inst.C_g
    y = np.clip(-q / np.diag(Q), -1.0, 1.0)
    best: tuple[float, Array, Array] | None = None

    def residual_at(yv: Array, lam: Array, r: Array) -> float:
        # Stationarity r - B'lam with B = [-I; I]; box rows give h directly.
        stat = float(np.linalg.norm(r + lam[:m] - lam[m:]))
        h_up = yv - 1.0
        h_lo = -yv - 1.0
        viol = float(max(0.0, h_up.max(initial=-np.inf), h_lo.max(initial=-np.inf)))
        comp = float(max(np.abs(lam[:m] * h_up).max(initial=0.0),
                         np.abs(lam[m:] * h_lo).max(initial=0.0)))
        return max(stat, max(viol, 0.0), comp)

    for it in range(1, max_iters + 1):
        r = Q @ y + q
        y_new = np.clip(y - step * r, -1.0, 1.0)
        y = y_new
        if it % 5 == 0 or it == max_iters:
            # Active set from the current iterate (clipped coordinates sit
            # exactly on the bounds), then KKT polish on that set.
            r = Q @ y + q
            at_up = y >= 1.0 - 1e-12
            at_lo = y <= -1.0 + 1e-12
            free = ~(at_up | at_lo)
            y_try = y.copy()
            y_try[at_up] = 1.0
            y_try[at_lo] = -1.0
            if free.any():
                rhs = -(q[free] + Q[np.ix_(free, ~free)] @ y_try[~free])
                y_try[free] = np.linalg.solve(Q[np.ix_(free, free)], rhs)
            if np.all(np.abs(y_try) <= 1.0 + 1e-12):
                y_try = np.clip(y_try, -1.0, 1.0)
                r_try = Q @ y_try + q
                lam = _box_duals_from_residual(y_try, r_try, tol=1e-12)
                res = residual_at(y_try, lam, r_try)
                if best is None or res < best[0]:
                    best = (res, y_try, lam)
                if res <= tol:
                    return LowerLevelSolution(y=y_try, lam=lam, kkt_residual=res, iterations=it)
            # Fall back to the raw PG iterate for progress tracking.
            lam_pg = _box_duals_from_residual(y, r, tol=1e-9)
            res_pg = residual_at(y, lam_pg, r)
            if best is None or res_pg < best[0]:
                best = (res_pg, y.copy(), lam_pg)
            if res_pg <= tol:
                return LowerLevelSolution(y=y, lam=lam_pg, kkt_residual=res_pg, iterations=it)
    raise SolverError(
        f"exact_lower_solve: no convergence to {tol:.1e} in {max_iters} iterations "
        f"(best residual {best[0]:.3e})",
        best_residual=best[0] if best else None,
    )


def F_true(inst: QuadraticInstance, x: Array, tol: float = 1e-10) -> float:
    """Deterministic bilevel objective f(x, y*(x)) through the exact LL solve."""
    sol = exact_lower_solve(inst, x, tol=tol)
    return inst.value_f(x, sol.y, None)


def active_coordinate_sets(inst: QuadraticInstance, sol: LowerLevelSolution,
                           x: Array, tol: float) -> tuple[Array, Array]:
    """(clamped, free) boolean masks; raises on a weakly active row.

    A row is weakly active when both its slack |h_i| and multiplier lambda_i
    fall below tol, which breaks KKT-sensitivity differentiation.
    """
    problem_h = constraint_values(box_constraints(inst.m, inst.n), x, sol.y)
    weak = (np.abs(problem_h) < tol) & (sol.lam < tol)
    if weak.any():
        raise DegenerateActiveSetError(
            f"degenerate active set: rows {np.flatnonzero(weak).tolist()} have "
            f"|h| and lambda below {tol:.1e}"
        )
    active_rows = np.abs(problem_h) <= tol
    clamped = active_rows[: inst.m] | active_rows[inst.m:]
    return clamped, ~clamped


def exact_hypergradient(inst: QuadraticInstance, x: Array, tol: float = 1e-7) -> Array:
    """Ground-truth grad F(x) by implicit differentiation of the box QP.

    On a strict active set the clamped coordinates of y*(x) are locally
    constant, so the sensitivity dy*/dx solves Q_l[free, free] (dy/dx)_free =
    -(E^T)_free with zeros on the clamped block, and

        grad F = grad_x f + (dy*/dx)' grad_y f      at (x, y*(x)).
    """
    x = np.asarray(x, dtype=float)
    sol = exact_lower_solve(inst, x, tol=min(1e-10, tol * 1e-2))
    clamped, free = active_coordinate_sets(inst, sol, x, tol)
    fx, fy = inst.grad_f(x, sol.y, None)
    if not free.any():
        return fx
    Et = np.zeros((inst.m, inst.n))
    k = min(inst.n, inst.m)
    Et[:k, :k] = np.eye(k)
    J_free = -np.linalg.solve(inst.Q_l[np.ix_(free, free)], Et[free])  # (m_free, n)
    return fx + J_free.T @ fy[free]


def curvature_estimate(inst: QuadraticInstance) -> float:
    """Upper bound on the curvature of F along smooth pieces.

    grad^2 F = Q_u + P J + J'P' + J'P_y J with ||J|| <= L_y = 1/mu_g on the
    free block (box rows do not depend on x).
    """
    L_y = 1.0 / inst.mu_g
    return inst.norm_Qu + 2.0 * inst.norm_P * L_y + inst.norm_Py * L_y ** 2


def lf_estimate(inst: QuadraticInstance, radius: float = 1.0) -> float:
    """Coarse Lipschitz scale of F over ||x|| <= radius (calibration input)."""
    L_y = 1.0 / inst.mu_g
    root_m = float(np.sqrt(inst.m))
    grad_x = inst.norm_Qu * radius + float(np.linalg.norm(inst.c_u)) + inst.norm_P * root_m
    grad_y = inst.norm_Py * root_m + inst.norm_P * radius
    return grad_x + L_y * grad_y
