"""Benchmark harness: convergence runs, dimension-scaling study, and probes.

Outputs are CSV traces plus a summary JSON per experiment. Every file embeds
the resolved spec, library version and seeds; rerunning a spec reproduces all
non-timing columns bit-exactly (timing lives only in columns/fields whose
names end in ``_seconds`` / ``elapsed_s`` and in the ``timing_fit`` block).
Floats are written with 17 significant digits so values round-trip.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import jsonschema

from . import __version__
from .errors import SolverError
from .outer import (CalibrationConstants, OuterConfig, OuterLoopError, RunTrace,
                    calibrate, run)
from .penalty import PenaltyConfig
from .problem import instance_hash, project_upper
from .quadratics import QuadraticInstance, F_true, curvature_estimate, generate, lf_estimate
from .spd import SpdConfig, spd_solve
from .verify import bias_probe, implicit_gradient_baseline, mse_check, variance_probe

METHODS = ("f2csa", "implicit_baseline")
KINDS = ("convergence", "scaling", "bias_probe", "variance_probe")


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if np.isnan(v):
            return "nan"
        return format(v, ".17g")
    return str(v)


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything one experiment needs; JSON-serializable."""

    kind: str
    out_dir: str
    dims: tuple = (50,)
    seeds: tuple = (0, 1, 2)
    noise_sigma: float = 0.01
    methods: tuple = METHODS
    mode: str = "calibrated"            # "calibrated" | "faithful"
    epsilon: float = 0.1
    goldstein_delta: float = 0.4
    lf_estimate: float = 1.0            # <= 0 means: use the instance-based estimate
    gap_estimate: float = 1.0
    faithful_eta: float = 1e-5
    instrument_stride: int = 25
    T: int | None = None                # overrides the calibrated budget when set
    x0_radius: float = 3.0
    alpha: float | None = 0.3  # oracle accuracy; None means the calibrated alpha = epsilon
    alpha_grid: tuple = (0.4, 0.2, 0.1, 0.05)
    ng: int | None = None
    ng_list: tuple = (16, 64, 256)
    trials: int = 200
    scaling_iters: int = 50
    scaling_sigma: float = 0.0
    workers: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.dims or not self.seeds:
            raise ValueError("dims and seeds must be nonempty")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "ng_list", tuple(int(g) for g in self.ng_list))


def spec_to_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


# ---------------------------------------------------------------------------
# Shared per-run plumbing
# ---------------------------------------------------------------------------

def initial_point(dim: int, seed: int, radius: float) -> np.ndarray:
    rng = np.random.default_rng([seed, 101])
    x0 = rng.standard_normal(dim)
    return (radius / float(np.linalg.norm(x0))) * x0


def f2csa_configs(spec: ExperimentSpec, inst: QuadraticInstance, seed: int,
                  x0: np.ndarray) -> tuple[OuterConfig, PenaltyConfig]:
    lf = spec.lf_estimate if spec.lf_estimate > 0 else lf_estimate(inst, radius=spec.x0_radius)
    outer_cfg, pen_cfg = calibrate(
        epsilon=spec.epsilon, goldstein_delta=spec.goldstein_delta,
        L_F_estimate=lf, sigma=spec.noise_sigma, F_gap_estimate=spec.gap_estimate,
        consts=CalibrationConstants(), seed=seed, x0=x0)
    if spec.mode == "faithful":
        outer_cfg = replace(outer_cfg, eta=spec.faithful_eta)
    if spec.alpha is not None or spec.ng is not None:
        pen_cfg = PenaltyConfig(alpha=spec.alpha if spec.alpha is not None else pen_cfg.alpha,
                                N_g=spec.ng if spec.ng is not None else pen_cfg.N_g)
    if spec.T is not None:
        K = max(1, spec.T // outer_cfg.M)
        outer_cfg = replace(outer_cfg, T=K * outer_cfg.M)
    return outer_cfg, pen_cfg


@dataclass
class BaselineTrace:
    """Iterate record of the implicit-gradient descent baseline."""

    T: int
    norm_g: np.ndarray
    f_true_vals: np.ndarray
    oracle_calls: np.ndarray
    elapsed: np.ndarray
    x_rows: np.ndarray
    x_final: np.ndarray


def run_baseline(inst: QuadraticInstance, T: int, stream: np.random.Generator,
                 step0: float | None = None, diminishing: bool = False,
                 tol: float = 1e-4, batch: int = 1, x0: np.ndarray | None = None,
                 f_true=None, instrument_stride: int = 0) -> BaselineTrace:
    """Projected SGD on x with the implicit (Hessian-based) gradient estimate.

    Uses the same SPD lower-level solver as the penalty oracle, warm-started
    across iterations; each step pays the dense sensitivity solve.
    """
    problem = inst.problem()
    x = np.zeros(inst.n) if x0 is None else np.asarray(x0, dtype=float).copy()
    beta0 = step0 if step0 is not None else 0.4 / curvature_estimate(inst)
    trace = BaselineTrace(T=T, norm_g=np.zeros(T), f_true_vals=np.full(T, np.nan),
                          oracle_calls=np.zeros(T), elapsed=np.zeros(T),
                          x_rows=np.zeros((T, inst.n)), x_final=x.copy())
    ll = None
    calls = 0
    t0 = time.perf_counter()
    for t in range(T):
        ll = spd_solve(problem, x, SpdConfig(tol=tol), stream,
                       y0=None if ll is None else ll.y,
                       lam0=None if ll is None else ll.lam)
        g = implicit_gradient_baseline(inst, x, tol=tol, stream=stream, batch=batch, ll=ll,
                                       strict=False)
        calls += ll.iterations + batch
        beta = beta0 / np.sqrt(t + 1.0) if diminishing else beta0
        x = project_upper(problem.upper_set, x - beta * g)
        trace.norm_g[t] = float(np.linalg.norm(g))
        trace.x_rows[t] = x
        trace.oracle_calls[t] = calls
        trace.elapsed[t] = time.perf_counter() - t0
        if f_true is not None and instrument_stride > 0 and (
                (t + 1) % instrument_stride == 0 or t == 0 or t == T - 1):
            trace.f_true_vals[t] = float(f_true(x))
    trace.x_final = x
    return trace


# ---------------------------------------------------------------------------
# CSV / JSON writers
# ---------------------------------------------------------------------------

TRACE_HEADER = ["t", "s_t", "norm_delta", "norm_g", "F_true", "oracle_calls", "elapsed_s"]
BLOCKS_HEADER = ["k", "gap_estimate"]
SCALING_HEADER = ["method", "dim", "seed", "iterations", "final_loss", "oracle_calls",
                  "median_iter_seconds", "total_seconds"]


def write_trace_csv(path: Path, trace: RunTrace | BaselineTrace) -> None:
    is_outer = isinstance(trace, RunTrace)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        for t in range(trace.T if not getattr(trace, "aborted", False) else len(trace.norm_g)):
            row = [
                t + 1,
                fmt(float(trace.s[t])) if is_outer else "nan",
                fmt(float(trace.norm_delta[t])) if is_outer else "nan",
                fmt(float(trace.norm_g[t])),
                fmt(float(trace.f_true_vals[t])),
                fmt(int(trace.oracle_calls[t])),
                fmt(float(trace.elapsed[t])),
            ]
            w.writerow(row)


def write_blocks_csv(path: Path, trace: RunTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BLOCKS_HEADER)
        for k in range(trace.block_gap.shape[0]):
            w.writerow([k + 1, fmt(float(trace.block_gap[k]))])


def write_json(path: Path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


SUMMARY_SCHEMA = {
    "type": "object",
    "required": ["kind", "library_version", "spec", "runs"],
    "properties": {
        "kind": {"enum": list(KINDS)},
        "library_version": {"type": "string"},
        "spec": {"type": "object"},
        "runs": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["method", "seed", "dim"],
                "properties": {
                    "method": {"enum": list(METHODS)},
                    "seed": {"type": "integer"},
                    "dim": {"type": "integer"},
                    "initial_loss": {"type": "number"},
                    "final_loss": {"type": "number"},
                    "decrease_fraction": {"type": "number"},
                    "iterations": {"type": "integer"},
                    "aborted": {"type": "boolean"},
                },
            },
        },
    },
}

PROBE_SCHEMA = {
    "type": "object",
    "required": ["kind", "library_version", "spec", "reports"],
    "properties": {
        "kind": {"enum": ["bias_probe", "variance_probe"]},
        "reports": {"type": "array"},
    },
}


def validate_summary(doc: dict) -> None:
    schema = PROBE_SCHEMA if doc.get("kind", "").endswith("_probe") else SUMMARY_SCHEMA
    jsonschema.validate(doc, schema)


# ---------------------------------------------------------------------------
# Experiments
# ---------------------------------------------------------------------------

def _one_convergence_run(spec_dict: dict, method: str, seed: int) -> dict:
    spec = ExperimentSpec(**spec_dict)
    dim = spec.dims[0]
    out = Path(spec.out_dir)
    inst = generate(dim, dim, seed=seed, noise_sigma=spec.noise_sigma)
    x0 = initial_point(dim, seed, spec.x0_radius)
    f_of = lambda x: F_true(inst, x)
    initial_loss = f_of(x0)
    row = {
        "method": method, "seed": seed, "dim": dim,
        "instance_hash": instance_hash(inst.problem()),
        "initial_loss": initial_loss, "aborted": False, "error": "",
    }
    t_start = time.perf_counter()
    trace_csv = out / f"convergence_{method}_seed{seed}.csv"
    try:
        if method == "f2csa":
            outer_cfg, pen_cfg = f2csa_configs(spec, inst, seed, x0)
            stream = np.random.default_rng([seed, 1])
            trace = run(inst.problem(), outer_cfg, pen_cfg, stream,
                        f_true=f_of, instrument_stride=spec.instrument_stride)
            # Terminal point: the last block average (the algorithm's output
            # family); x_out itself is a uniform draw over blocks.
            x_final = trace.block_x[-1]
            write_trace_csv(trace_csv, trace)
            blocks_csv = out / f"convergence_{method}_seed{seed}_blocks.csv"
            write_blocks_csv(blocks_csv, trace)
            row.update(iterations=int(trace.T), oracle_calls=int(trace.oracle_calls[-1]),
                       blocks_csv=blocks_csv.name,
                       config={"D": trace.D, "eta": outer_cfg.eta, "T": outer_cfg.T,
                               "M": trace.M, "K": trace.K, "alpha": pen_cfg.alpha,
                               "N_g": pen_cfg.N_g})
        else:
            stream = np.random.default_rng([seed, 2])
            T = spec.T if spec.T is not None else _default_budget(spec)
            diminishing = spec.mode == "faithful"
            step0 = spec.faithful_eta * 10.0 if spec.mode == "faithful" else None
            alpha = spec.alpha if spec.alpha is not None else spec.epsilon
            ll_tol = PenaltyConfig(alpha=alpha).ll_tol_scale * alpha ** 3  # same policy as f2csa
            trace = run_baseline(inst, T, stream, step0=step0, diminishing=diminishing,
                                 tol=ll_tol, batch=max(1, spec.ng or 1), x0=x0,
                                 f_true=f_of, instrument_stride=spec.instrument_stride)
            x_final = trace.x_final
            write_trace_csv(trace_csv, trace)
            row.update(iterations=int(trace.T), oracle_calls=int(trace.oracle_calls[-1]))
    except OuterLoopError as exc:
        write_trace_csv(trace_csv, exc.trace)
        row.update(aborted=True, error=str(exc), iterations=int(len(exc.trace.norm_g)),
                   final_loss=float("nan"), decrease_fraction=float("nan"),
                   trace_csv=trace_csv.name, wall_seconds=time.perf_counter() - t_start)
        return row
    final_loss = f_of(x_final)
    row.update(final_loss=final_loss,
               decrease_fraction=(initial_loss - final_loss) / max(abs(initial_loss), 1e-30),
               trace_csv=trace_csv.name,
               wall_seconds=time.perf_counter() - t_start)
    return row


def _default_budget(spec: ExperimentSpec) -> int:
    lf = spec.lf_estimate if spec.lf_estimate > 0 else 1.0
    outer_cfg, _ = calibrate(spec.epsilon, spec.goldstein_delta, lf,
                             spec.noise_sigma, spec.gap_estimate)
    return outer_cfg.T


def run_convergence(spec: ExperimentSpec) -> dict:
    """Figure-1 style study: loss trajectories per (method, seed) at one dim."""
    if spec.kind != "convergence":
        raise ValueError("spec.kind must be 'convergence'")
    if not spec.methods:
        raise ValueError("no methods selected")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(m, s) for m in spec.methods for s in spec.seeds]
    rows = _run_pool(_one_convergence_run, spec, tasks)
    table: dict = {}
    for r in rows:
        table.setdefault(r["method"], {})[str(r["seed"])] = r.get("final_loss", float("nan"))
    doc = {
        "kind": "convergence",
        "library_version": __version__,
        "spec": spec_to_dict(spec),
        "runs": rows,
        "final_loss_table": table,
    }
    validate_summary(doc)
    write_json(out / "summary.json", doc)
    return doc


def _one_scaling_run(spec_dict: dict, method: str, dim_seed: tuple) -> dict:
    spec = ExperimentSpec(**spec_dict)
    dim, seed = dim_seed
    try:
        inst = generate(dim, dim, seed=seed, noise_sigma=spec.scaling_sigma)
    except MemoryError as exc:  # record and skip oversized cells
        return {"method": method, "dim": dim, "seed": seed, "error": f"MemoryError: {exc}"}
    T = spec.scaling_iters
    alpha = spec.alpha if spec.alpha is not None else 0.2
    n_g = spec.ng if spec.ng is not None else (1 if spec.scaling_sigma == 0 else 4)
    t_start = time.perf_counter()
    if method == "f2csa":
        block = min(10, T)  # keep at least one full block under tiny budgets
        outer_cfg = OuterConfig(D=0.01, eta=1e-3, T=T, goldstein_delta=0.01 * block,
                                epsilon=alpha, seed=seed)
        pen_cfg = PenaltyConfig(alpha=alpha, N_g=n_g)
        stream = np.random.default_rng([seed, dim, 1])
        trace = run(inst.problem(), outer_cfg, pen_cfg, stream)
        per_iter = np.diff(np.concatenate([[0.0], trace.elapsed]))
        x_final = trace.x_rows[-1]
        calls = int(trace.oracle_calls[-1])
    else:
        stream = np.random.default_rng([seed, dim, 2])
        mu_g = inst.mu_g
        trace = run_baseline(inst, T, stream, tol=mu_g * alpha ** 3, batch=n_g)
        per_iter = np.diff(np.concatenate([[0.0], trace.elapsed]))
        x_final = trace.x_final
        calls = int(trace.oracle_calls[-1])
    return {
        "method": method, "dim": dim, "seed": seed, "iterations": T,
        "final_loss": F_true(inst, x_final),
        "oracle_calls": calls,
        "median_iter_seconds": float(np.median(per_iter)),
        "total_seconds": time.perf_counter() - t_start,
    }


def run_scaling(spec: ExperimentSpec) -> dict:
    """Figure-2 style study: per-iteration wall time vs dimension per method.

    Defaults to sigma = 0 so the timing isolates each method's per-iteration
    computational structure (gradient draws would otherwise add the same
    Theta(d^2) sampling cost to both methods); noise is configurable via
    ``scaling_sigma``.
    """
    if spec.kind != "scaling":
        raise ValueError("spec.kind must be 'scaling'")
    if not spec.methods:
        raise ValueError("no methods selected")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(m, (d, s)) for m in spec.methods for d in spec.dims for s in spec.seeds]
    rows = _run_pool(_one_scaling_run, spec, tasks)
    skipped = [r for r in rows if r.get("error")]
    rows = [r for r in rows if not r.get("error")]
    with open(out / "scaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCALING_HEADER)
        for r in rows:
            w.writerow([r["method"], r["dim"], r["seed"], r["iterations"],
                        fmt(r["final_loss"]), r["oracle_calls"],
                        fmt(r["median_iter_seconds"]), fmt(r["total_seconds"])])
    timing_fit: dict = {}
    for m in spec.methods:
        med_by_dim = {}
        for d in spec.dims:
            vals = [r["median_iter_seconds"] for r in rows if r["method"] == m and r["dim"] == d]
            med_by_dim[str(d)] = float(np.median(vals))
        dims = np.array(spec.dims, dtype=float)
        meds = np.array([med_by_dim[str(d)] for d in spec.dims])
        slope = float(np.polyfit(np.log(dims), np.log(meds), 1)[0]) if len(dims) >= 2 else float("nan")
        timing_fit[m] = {"median_iter_seconds_by_dim": med_by_dim, "fitted_exponent": slope}
    doc = {
        "kind": "scaling",
        "library_version": __version__,
        "spec": spec_to_dict(spec),
        "runs": rows,
        "skipped": skipped,
        "timing_fit": timing_fit,
    }
    validate_summary(doc)
    write_json(out / "summary.json", doc)
    return doc


def run_probe(spec: ExperimentSpec) -> dict:
    """Dispatch to the verification probes and write their reports."""
    if spec.kind not in ("bias_probe", "variance_probe"):
        raise ValueError(f"unknown probe kind {spec.kind!r}")
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dim = spec.dims[0]
    reports = []
    for seed in spec.seeds:
        inst = generate(dim, dim, seed=seed, noise_sigma=spec.noise_sigma)
        x = np.zeros(dim)
        stream = np.random.default_rng([seed, 3])
        if spec.kind == "bias_probe":
            rep = bias_probe(inst, x, alpha_grid=spec.alpha_grid, trials=spec.trials,
                             stream=stream)
        else:
            alpha = spec.alpha if spec.alpha is not None else 0.3
            rep = variance_probe(inst, x, alpha=alpha, N_g_list=spec.ng_list,
                                 trials=spec.trials, stream=stream)
        d = rep.as_dict()
        d["seed"] = seed
        if rep.cells:
            d["mse_check"] = {
                "passed": mse_check(rep.cells).passed,
                "worst_ratio": mse_check(rep.cells).worst_ratio,
            }
        reports.append(d)
    doc = {
        "kind": spec.kind,
        "library_version": __version__,
        "spec": spec_to_dict(spec),
        "reports": reports,
    }
    validate_summary(doc)
    write_json(out / "summary.json", doc)
    with open(out / "cells.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "alpha", "N_g", "trials", "bias_norm", "variance",
                    "single_sample_variance", "mse"])
        for rep in reports:
            for c in rep["cells"]:
                w.writerow([rep["seed"], fmt(c["alpha"]), c["N_g"], c["trials"],
                            fmt(c["bias_norm"]), fmt(c["variance"]),
                            fmt(c["single_sample_variance"]), fmt(c["mse"])])
    return doc


def _run_pool(fn, spec: ExperimentSpec, tasks: list) -> list[dict]:
    spec_dict = spec_to_dict(spec)
    if spec.workers <= 1:
        return [fn(spec_dict, m, arg) for m, arg in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=spec.workers) as pool:
        futures = [pool.submit(fn, spec_dict, m, arg) for m, arg in tasks]
        return [f.result() for f in futures]


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _parse_x(text: str, dim: int) -> np.ndarray:
    if text in ("", "zeros"):
        return np.zeros(dim)
    vals = np.array([float(v) for v in text.split(",")])
    if vals.shape != (dim,):
        raise ValueError(f"--x must have {dim} components")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="f2csa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--dim", type=int, nargs="+", default=None)
        sp.add_argument("--seeds", type=int, nargs="+", default=None)
        sp.add_argument("--sigma", type=float, default=None)
        sp.add_argument("--alpha", type=float, default=None)
        sp.add_argument("--ng", type=int, default=None)
        sp.add_argument("--mode", choices=["faithful", "calibrated"], default=None)
        sp.add_argument("--out", type=str, default="runs")
        sp.add_argument("--config", type=str, default=None,
                        help="JSON spec; overrides the flags")
        sp.add_argument("--methods", nargs="+", choices=list(METHODS), default=None)
        sp.add_argument("--workers", type=int, default=None)

    sp = sub.add_parser("convergence", help="loss trajectories per method and seed")
    common(sp)
    sp.add_argument("--T", type=int, default=None)
    sp.add_argument("--epsilon", type=float, default=None)
    sp.add_argument("--delta", type=float, default=None, help="Goldstein radius")
    sp.add_argument("--lf", type=float, default=None)
    sp.add_argument("--gap", type=float, default=None)
    sp.add_argument("--stride", type=int, default=None)

    sp = sub.add_parser("scaling", help="per-iteration cost vs dimension")
    common(sp)
    sp.add_argument("--iters", type=int, default=None)

    sp = sub.add_parser("probe", help="bias / variance verification probes")
    common(sp)
    sp.add_argument("--probe-kind", choices=["bias", "variance"], default="bias")
    sp.add_argument("--trials", type=int, default=None)
    sp.add_argument("--ng-list", type=int, nargs="+", default=None)

    sp = sub.add_parser("solve-ll", help="solve one lower level and print the pair")
    sp.add_argument("--dim", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--tol", type=float, default=1e-8)
    sp.add_argument("--x", type=str, default="zeros")

    sp = sub.add_parser("hypergrad", help="one oracle call with diagnostics")
    sp.add_argument("--dim", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sigma", type=float, default=0.0)
    sp.add_argument("--alpha", type=float, default=0.1)
    sp.add_argument("--ng", type=int, default=1)
    sp.add_argument("--x", type=str, default="zeros")
    return p


def _spec_from_args(args, kind: str) -> ExperimentSpec:
    overrides: dict = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    base: dict = {"kind": kind, "out_dir": args.out}
    mapping = [
        ("dim", "dims"), ("seeds", "seeds"), ("sigma", "noise_sigma"),
        ("alpha", "alpha"), ("ng", "ng"), ("mode", "mode"), ("methods", "methods"),
        ("workers", "workers"), ("T", "T"), ("epsilon", "epsilon"),
        ("delta", "goldstein_delta"), ("lf", "lf_estimate"), ("gap", "gap_estimate"),
        ("stride", "instrument_stride"), ("iters", "scaling_iters"),
        ("trials", "trials"), ("ng_list", "ng_list"),
    ]
    for arg_name, spec_name in mapping:
        val = getattr(args, arg_name, None)
        if val is not None:
            base[spec_name] = val
    if kind == "scaling" and "noise_sigma" in base:
        base["scaling_sigma"] = base.pop("noise_sigma")
    base.update(overrides)  # config file wins
    return ExperimentSpec(**base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "convergence":
        doc = run_convergence(_spec_from_args(args, "convergence"))
        print(json.dumps(doc["final_loss_table"], sort_keys=True, indent=1))
        return 0
    if args.command == "scaling":
        spec = _spec_from_args(args, "scaling")
        if spec.dims == (50,):
            spec = replace(spec, dims=(100, 200, 400, 700, 1000))
        doc = run_scaling(spec)
        print(json.dumps(doc["timing_fit"], sort_keys=True, indent=1))
        return 0
    if args.command == "probe":
        kind = "bias_probe" if args.probe_kind == "bias" else "variance_probe"
        spec = _spec_from_args(args, kind)
        if kind == "variance_probe" and spec.noise_sigma == 0:
            raise SystemExit("variance probe requires --sigma > 0")
        doc = run_probe(spec)
        print(json.dumps([r.get("mse_check") for r in doc["reports"]], indent=1))
        return 0
    if args.command == "solve-ll":
        inst = generate(args.dim, args.dim, seed=args.seed, noise_sigma=args.sigma)
        x = _parse_x(args.x, args.dim)
        stream = np.random.default_rng([args.seed, 7])
        try:
            sol = spd_solve(inst.problem(), x, SpdConfig(tol=args.tol), stream)
        except SolverError as exc:
            print(json.dumps({"error": str(exc)}))
            return 1
        print(json.dumps({"y": sol.y.tolist(), "lambda": sol.lam.tolist(),
                          "kkt_residual": sol.kkt_residual,
                          "iterations": sol.iterations}, indent=1))
        return 0
    if args.command == "hypergrad":
        from .penalty import hypergradient
        inst = generate(args.dim, args.dim, seed=args.seed, noise_sigma=args.sigma)
        x = _parse_x(args.x, args.dim)
        cfg = PenaltyConfig(alpha=args.alpha, N_g=args.ng)
        stream = np.random.default_rng([args.seed, 8])
        est = hypergradient(inst.problem(), x, cfg, stream)
        out = est.diagnostics_row(cfg)
        out["grad"] = est.grad.tolist()
        print(json.dumps(out, indent=1))
        return 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
