import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from f2csa_plots import PlotSpec, SchemaError, plot
from f2csa_plots.cli import main


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


@pytest.fixture
def synthetic_convergence(tmp_path):
    spec = {"dims": [3], "seeds": [0, 1], "methods": ["f2csa", "implicit_baseline"],
            "noise_sigma": 0.01}
    table = {}
    for m in spec["methods"]:
        table[m] = {}
        for s in spec["seeds"]:
            rows = [[t, 0.5, 0.01, 1.0, 10.0 / (t + 1), t, 0.1 * t] for t in range(1, 21)]
            write_csv(tmp_path / f"convergence_{m}_seed{s}.csv",
                      ["t", "s_t", "norm_delta", "norm_g", "F_true", "oracle_calls",
                       "elapsed_s"], rows)
            table[m][str(s)] = 10.0 / 20 + (0.01 if m == "f2csa" else 0.0)
    (tmp_path / "summary.json").write_text(json.dumps(
        {"kind": "convergence", "spec": spec, "final_loss_table": table, "runs": []}))
    return tmp_path, table


def test_convergence_figure_and_caption(synthetic_convergence):
    folder, table = synthetic_convergence
    img, cap = plot(PlotSpec(input_dir=str(folder), kind="convergence",
                             output=str(folder / "fig.png")))
    assert img.exists() and img.stat().st_size > 0
    lines = cap.read_text().splitlines()
    # one caption line per (method, seed) final loss; 2 methods x 2 seeds
    finals = [ln for ln in lines if ln.startswith("final_loss")]
    assert len(finals) == 4
    for ln in finals:
        _, method, seed_tag, value = ln.split()
        assert float(value) == pytest.approx(table[method][seed_tag[4:]], abs=1e-12)


def test_caption_rerun_identical(synthetic_convergence):
    folder, _ = synthetic_convergence
    spec = PlotSpec(input_dir=str(folder), kind="convergence", output=str(folder / "f.png"))
    _, cap1 = plot(spec)
    text1 = cap1.read_text()
    _, cap2 = plot(spec)
    assert cap2.read_text() == text1


def test_missing_column_named_in_error(tmp_path):
    write_csv(tmp_path / "scaling.csv", ["method", "dim", "seed"], [["f2csa", 10, 0]])
    (tmp_path / "summary.json").write_text(json.dumps(
        {"kind": "scaling", "spec": {"methods": ["f2csa"]}}))
    with pytest.raises(SchemaError, match="median_iter_seconds"):
        plot(PlotSpec(input_dir=str(tmp_path), kind="scaling", output=str(tmp_path / "s.png")))


def test_malformed_csv_nonzero_exit(tmp_path, capsys):
    (tmp_path / "scaling.csv").write_text("")  # headerless
    (tmp_path / "summary.json").write_text(json.dumps({"kind": "scaling", "spec": {}}))
    rc = main(["--kind", "scaling", "--in", str(tmp_path), "--out", str(tmp_path / "x.png")])
    assert rc == 2
    assert "schema error" in capsys.readouterr().err


def test_unknown_kind_rejected(tmp_path):
    with pytest.raises(SchemaError, match="unknown figure kind"):
        PlotSpec(input_dir=str(tmp_path), kind="pie", output="x.png")


def test_scaling_fit_single_method(tmp_path):
    rows = [["f2csa", d, 0, 5, 0.0, 10, 1e-5 * d ** 1.5, 1.0] for d in (10, 20, 40)]
    write_csv(tmp_path / "scaling.csv",
              ["method", "dim", "seed", "iterations", "final_loss", "oracle_calls",
               "median_iter_seconds", "total_seconds"], rows)
    (tmp_path / "summary.json").write_text(json.dumps(
        {"kind": "scaling", "spec": {"methods": ["f2csa"]}}))
    _, cap = plot(PlotSpec(input_dir=str(tmp_path), kind="scaling",
                           output=str(tmp_path / "s.png")))
    line = [ln for ln in cap.read_text().splitlines() if ln.startswith("fitted_exponent")][0]
    assert float(line.split()[-1]) == pytest.approx(1.5, abs=1e-9)


def test_probe_charts(tmp_path):
    header = ["seed", "alpha", "N_g", "trials", "bias_norm", "variance",
              "single_sample_variance", "mse"]
    bias_dir = tmp_path / "bias"
    var_dir = tmp_path / "var"
    for d in (bias_dir, var_dir):
        d.mkdir()
    write_csv(bias_dir / "cells.csv", header,
              [[0, a, 1, 1, 0.5 * a, 0.0, 0.0, (0.5 * a) ** 2] for a in (0.4, 0.2, 0.1)])
    (bias_dir / "summary.json").write_text(json.dumps({"kind": "bias_probe", "spec": {}}))
    write_csv(var_dir / "cells.csv", header,
              [[0, 0.3, n, 100, 0.1, 2e-3 / n, 2e-3, 1e-2] for n in (16, 64, 256)])
    (var_dir / "summary.json").write_text(json.dumps({"kind": "variance_probe", "spec": {}}))
    _, cap_b = plot(PlotSpec(input_dir=str(bias_dir), kind="bias",
                             output=str(bias_dir / "b.png")))
    slope_line = [ln for ln in cap_b.read_text().splitlines() if "bias_slope" in ln][0]
    assert float(slope_line.split()[-1]) == pytest.approx(1.0, abs=1e-9)
    _, cap_v = plot(PlotSpec(input_dir=str(var_dir), kind="variance",
                             output=str(var_dir / "v.png")))
    assert len([ln for ln in cap_v.read_text().splitlines() if ln.startswith("variance")]) == 3


# -- acceptance: real outputs from the solver harness, via its CLI only --------

def run_harness(*args):
    subprocess.run([sys.executable, "-m", "f2csa.cli", *args], check=True,
                   capture_output=True)


@pytest.mark.slow
def test_acceptance_plots_match_summary(tmp_path):
    conv_dir = tmp_path / "conv"
    scal_dir = tmp_path / "scal"
    run_harness("convergence", "--dim", "6", "--seeds", "0", "1", "--sigma", "0.01",
                "--T", "40", "--epsilon", "0.5", "--alpha", "0.3", "--out", str(conv_dir))
    run_harness("scaling", "--dim", "16", "32", "--seeds", "0", "--out", str(scal_dir))

    _, conv_cap = plot(PlotSpec(input_dir=str(conv_dir), kind="convergence",
                                output=str(tmp_path / "conv.png")))
    summary = json.loads((conv_dir / "summary.json").read_text())
    finals = {}
    for ln in conv_cap.read_text().splitlines():
        if ln.startswith("final_loss"):
            _, method, seed_tag, value = ln.split()
            finals[(method, seed_tag[4:])] = float(value)
    for method, by_seed in summary["final_loss_table"].items():
        for seed, val in by_seed.items():
            assert finals[(method, seed)] == pytest.approx(val, abs=1e-6)

    _, scal_cap = plot(PlotSpec(input_dir=str(scal_dir), kind="scaling",
                                output=str(tmp_path / "scal.png")))
    summary = json.loads((scal_dir / "summary.json").read_text())
    slopes = {}
    for ln in scal_cap.read_text().splitlines():
        if ln.startswith("fitted_exponent"):
            _, method, value = ln.split()
            slopes[method] = float(value)
    for method, fit in summary["timing_fit"].items():
        assert slopes[method] == pytest.approx(fit["fitted_exponent"], abs=1e-6)
    print("\nACCEPTANCE plotting: PASS (captions match summary to 1e-6)")
