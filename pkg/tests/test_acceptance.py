"""Acceptance gate: one test per headline criterion, each printing a PASS line.

Budgets are asserted as stated; protocols (instance seeds, probe points,
experiment specs) are pinned here so every run reproduces the same numbers.
"""

import csv
import json
import time

import numpy as np
import pytest

import f2csa
from f2csa.cli import ExperimentSpec, run_convergence, run_scaling
from f2csa.outer import OuterConfig, calibrate, clip, run, smoothed_block_gaps
from f2csa.penalty import PenaltyConfig, sigma_h, sigma_lambda
from f2csa.verify import bias_probe, mse_check, variance_probe

from oracles import central_diff, line_fit_r2
from test_cli import read_csv_no_timing, strip_timing


def report(name, ok, detail=""):
    print(f"\nACCEPTANCE {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"{name}: {detail}"


# -- 1. activation correctness -------------------------------------------------

def test_activation_correctness():
    t0 = time.perf_counter()
    tau_delta, eps_lambda = 0.0125, 1e-3

    def ref_sigma_h(z):
        if z < -tau_delta:
            return 0.0
        if z < 0.0:
            return (tau_delta + z) / tau_delta
        return 1.0

    def ref_sigma_lambda(z):
        if z <= 0.0:
            return 0.0
        if z < eps_lambda:
            return z / eps_lambda
        return 1.0

    grid = np.concatenate([
        np.linspace(-3 * tau_delta, 3 * tau_delta, 50_000),
        np.linspace(-3 * eps_lambda, 3 * eps_lambda, 50_000),
        [-tau_delta, 0.0, eps_lambda],
    ])
    sh = sigma_h(grid, tau_delta)
    sl = sigma_lambda(grid, eps_lambda)
    ref_h = np.array([ref_sigma_h(z) for z in grid])
    ref_l = np.array([ref_sigma_lambda(z) for z in grid])
    exact = np.array_equal(sh, ref_h) and np.array_equal(sl, ref_l)
    cont = max(
        abs(sigma_h(-tau_delta - 1e-13 * tau_delta, tau_delta) - sigma_h(-tau_delta, tau_delta)),
        abs(sigma_h(-1e-13 * tau_delta, tau_delta) - sigma_h(0.0, tau_delta)),
        abs(sigma_lambda(1e-13 * eps_lambda, eps_lambda) - sigma_lambda(0.0, eps_lambda)),
        abs(sigma_lambda(eps_lambda * (1 - 1e-13), eps_lambda) - sigma_lambda(eps_lambda, eps_lambda)),
    )
    elapsed = time.perf_counter() - t0
    report("activation-correctness", exact and cont <= 1e-12 and elapsed < 1.0,
           f"(grid {grid.size} pts, continuity gap {cont:.1e}, {elapsed:.2f}s)")


# -- 2. lower-level oracle equivalence ------------------------------------------

def test_lower_level_oracle_equivalence():
    t0 = time.perf_counter()
    worst_dy = 0.0
    worst_r2 = 1.0
    for seed in range(100, 120):
        inst = f2csa.generate(5, 5, seed=seed, noise_sigma=0.0)
        prob = inst.problem()
        x = np.random.default_rng(seed).standard_normal(5)
        sol = f2csa.spd_solve(prob, x, f2csa.SpdConfig(tol=1e-6))
        ref = f2csa.exact_lower_solve(inst, x, tol=1e-11)
        worst_dy = max(worst_dy, float(np.linalg.norm(sol.y - ref.y)))
        iters = [f2csa.spd_solve(prob, x, f2csa.SpdConfig(tol=tol)).iterations
                 for tol in (1e-2, 1e-4, 1e-6)]
        _, _, r2 = line_fit_r2(np.log([1e2, 1e4, 1e6]), np.array(iters, dtype=float))
        worst_r2 = min(worst_r2, r2)
    elapsed = time.perf_counter() - t0
    report("lower-level-oracle-equivalence",
           worst_dy <= 3e-6 and worst_r2 >= 0.9 and elapsed < 30.0,
           f"(max ||dy|| {worst_dy:.2e}, min R^2 {worst_r2:.3f}, {elapsed:.1f}s)")


# -- 3. exact hypergradient vs finite differences -------------------------------

def test_exact_hypergradient_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in (0, 1, 2):
        inst = f2csa.generate(5, 5, seed=seed, noise_sigma=0.0)
        rng = np.random.default_rng(1000 + seed)
        accepted = 0
        while accepted < 20:
            x = 2.5 * rng.standard_normal(5)
            try:
                g = f2csa.exact_hypergradient(inst, x, tol=1e-4)
            except f2csa.DegenerateActiveSetError:
                continue
            fd = central_diff(lambda z: f2csa.F_true(inst, z), x, step=1e-5)
            rel = float(np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12))
            worst = max(worst, rel)
            accepted += 1
    elapsed = time.perf_counter() - t0
    report("exact-hypergradient-oracle", worst <= 1e-4 and elapsed < 30.0,
           f"(worst rel err {worst:.2e} over 60 strict points, {elapsed:.1f}s)")


# -- 4-6. bias, variance, MSE ----------------------------------------------------

@pytest.fixture(scope="module")
def probe_reports():
    bias_reps = []
    for seed in (0, 1, 2):
        inst = f2csa.generate(5, 5, seed=seed, noise_sigma=0.0)
        bias_reps.append(bias_probe(inst, np.zeros(5), alpha_grid=(0.4, 0.2, 0.1, 0.05),
                                    stream=np.random.default_rng([seed, 3])))
    inst_noisy = f2csa.generate(5, 5, seed=0, noise_sigma=0.01)
    var_rep = variance_probe(inst_noisy, np.zeros(5), alpha=0.3,
                             N_g_list=(1, 16, 64, 256), trials=200,
                             stream=np.random.default_rng([0, 4]))
    return bias_reps, var_rep


def test_bias_scales_linearly_in_alpha(probe_reports):
    t0 = time.perf_counter()
    bias_reps, _ = probe_reports
    slopes = [rep.bias_slope for rep in bias_reps]
    monotone = all(
        all(rep.cells[i].bias_norm > rep.cells[i + 1].bias_norm
            for i in range(len(rep.cells) - 1))
        for rep in bias_reps)
    ok = all(0.6 <= s <= 1.4 for s in slopes) and monotone
    report("bias-linear-in-alpha", ok and time.perf_counter() - t0 < 300.0,
           f"(slopes {[round(s, 3) for s in slopes]}, monotone={monotone})")


def test_variance_scales_inversely_in_batch(probe_reports):
    _, var_rep = probe_reports
    v = {c.N_g: c.variance for c in var_rep.cells}
    r_16_64 = v[16] / v[64]
    r_16_256 = v[16] / v[256]
    ok = 2.5 <= r_16_64 <= 6.0 and 9.0 <= r_16_256 <= 28.0
    report("variance-inverse-in-batch", ok,
           f"(var16/var64 {r_16_64:.2f} in [2.5,6], var16/var256 {r_16_256:.2f} in [9,28])")


def test_mse_bound(probe_reports):
    bias_reps, var_rep = probe_reports
    cells = [c for rep in bias_reps for c in rep.cells] + list(var_rep.cells)
    out = mse_check(cells, slack=1.25)
    # The fitted bias constant should be stable across instances of the family
    # (+/- 50%, i.e. max/min <= 3).
    c_hats = [max(c.bias_norm / c.alpha for c in rep.cells) for rep in bias_reps]
    stable = max(c_hats) / min(c_hats) <= 3.0
    report("mse-bound", out.passed and stable,
           f"(worst cell ratio {out.worst_ratio:.3f} <= 1.25, {len(cells)} cells, "
           f"fitted C range {min(c_hats):.3f}-{max(c_hats):.3f})")


# -- 7. outer-loop invariants -------------------------------------------------

def test_outer_loop_invariants():
    # Clip unit behavior, including the zero vector.
    ok_clip = (np.array_equal(clip(np.zeros(3), 0.5), np.zeros(3))
               and np.allclose(clip(np.array([3.0, 4.0]), 1.0), [0.6, 0.8])
               and np.array_equal(clip(np.array([0.1, 0.0]), 1.0), np.array([0.1, 0.0])))
    worst_delta, worst_block = 0.0, 0.0
    traces = []
    for sigma, seed in ((0.0, 0), (0.01, 1)):
        inst = f2csa.generate(6, 6, seed=seed, noise_sigma=sigma)
        oc = OuterConfig(D=0.02, eta=2e-3, T=60, goldstein_delta=0.2, epsilon=0.2,
                         x0=np.ones(6) / np.sqrt(6))
        pc = PenaltyConfig(alpha=0.25, N_g=2 if sigma else 1)
        tr = run(inst.problem(), oc, pc, np.random.default_rng([seed, 6]))
        traces.append((oc, tr))
    for oc, tr in traces:
        worst_delta = max(worst_delta, float(tr.norm_delta.max()) / oc.D)
        assert tr.M * oc.D <= oc.goldstein_delta + 1e-12
        for k in range(tr.K):
            block = tr.z_rows[k * tr.M:(k + 1) * tr.M]
            d = float(np.linalg.norm(block - tr.block_x[k], axis=1).max())
            worst_block = max(worst_block, d / (tr.M * oc.D))
    ok = ok_clip and worst_delta <= 1.0 + 1e-12 and worst_block <= 1.0 + 1e-12
    report("outer-loop-invariants", ok,
           f"(max ||Delta||/D {worst_delta:.6f}, max block dist ratio {worst_block:.3f})")


# -- 8. convergence parity -------------------------------------------------------

def test_convergence_parity(tmp_path):
    t0 = time.perf_counter()
    spec = ExperimentSpec(kind="convergence", out_dir=str(tmp_path), dims=(50,),
                          seeds=(0, 1, 2), noise_sigma=0.01,
                          methods=("f2csa", "implicit_baseline"), alpha=0.3, T=2000)
    doc = run_convergence(spec)
    table = doc["final_loss_table"]
    rows = {(r["method"], r["seed"]): r for r in doc["runs"]}
    ok = True
    details = []
    for seed in (0, 1, 2):
        a = table["f2csa"][str(seed)]
        b = table["implicit_baseline"][str(seed)]
        close = abs(a - b) <= 0.1 * abs(b)
        dec_a = rows[("f2csa", seed)]["decrease_fraction"] >= 0.5
        dec_b = rows[("implicit_baseline", seed)]["decrease_fraction"] >= 0.5
        ok = ok and close and dec_a and dec_b
        details.append(f"s{seed}:|d|={abs(a - b):.3f}<={0.1 * abs(b):.3f}")
    elapsed = time.perf_counter() - t0
    report("convergence-parity", ok and elapsed < 600.0,
           f"({'; '.join(details)}; both halve the loss; {elapsed:.0f}s)")


# -- 9. stationarity trend -------------------------------------------------------

def test_stationarity_trend():
    t0 = time.perf_counter()
    inst = f2csa.generate(10, 10, seed=0, noise_sigma=0.0)
    rng0 = np.random.default_rng([0, 101])
    x0 = rng0.standard_normal(10)
    x0 *= 3.0 / np.linalg.norm(x0)
    oc, pc = calibrate(epsilon=0.1, goldstein_delta=0.5, L_F_estimate=1.0, sigma=0.0,
                       F_gap_estimate=1.0, seed=0, x0=x0)
    tr = run(inst.problem(), oc, pc, np.random.default_rng([0, 1]))
    sm = smoothed_block_gaps(tr, window=5)
    first, last = sm[4], sm[-1]
    elapsed = time.perf_counter() - t0
    report("stationarity-trend", last <= 0.5 * first and elapsed < 300.0,
           f"(smoothed gap {first:.3f} -> {last:.3f}, ratio {last / first:.3f} <= 0.5, {elapsed:.0f}s)")


# -- 10. scaling shape ------------------------------------------------------------

def test_scaling_shape(tmp_path):
    t0 = time.perf_counter()
    spec = ExperimentSpec(kind="scaling", out_dir=str(tmp_path),
                          dims=(100, 200, 400, 700, 1000), seeds=(0,),
                          methods=("f2csa", "implicit_baseline"), scaling_iters=50,
                          scaling_sigma=0.0)
    doc = run_scaling(spec)
    e_f = doc["timing_fit"]["f2csa"]["fitted_exponent"]
    e_b = doc["timing_fit"]["implicit_baseline"]["fitted_exponent"]
    elapsed = time.perf_counter() - t0
    report("scaling-shape", e_f <= e_b - 0.3 and elapsed < 900.0,
           f"(exponents: f2csa {e_f:.2f} vs baseline {e_b:.2f}; gap {e_b - e_f:.2f} >= 0.3; {elapsed:.0f}s)")


# -- 11. determinism ---------------------------------------------------------------

def test_determinism(tmp_path):
    def spec_for(tag):
        return ExperimentSpec(kind="convergence", out_dir=str(tmp_path / tag), dims=(8,),
                              seeds=(0,), noise_sigma=0.01,
                              methods=("f2csa", "implicit_baseline"),
                              epsilon=0.5, T=60, instrument_stride=15, alpha=0.3)

    docs = {tag: run_convergence(spec_for(tag)) for tag in ("a", "b")}
    clean = {}
    for tag, doc in docs.items():
        d = strip_timing(doc)
        d["spec"]["out_dir"] = ""
        clean[tag] = json.dumps(d, sort_keys=True)
    same_json = clean["a"] == clean["b"]
    same_files = True
    for name in ("convergence_f2csa_seed0.csv", "convergence_f2csa_seed0_blocks.csv",
                 "convergence_implicit_baseline_seed0.csv"):
        same_files = same_files and (read_csv_no_timing(tmp_path / "a" / name)
                                     == read_csv_no_timing(tmp_path / "b" / name))
    report("determinism", same_json and same_files,
           "(rerun reproduces every non-timing output bit-exactly)")
