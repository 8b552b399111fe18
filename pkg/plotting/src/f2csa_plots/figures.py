"""Figure builders: convergence bands, scaling fits, bias/variance probes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

KINDS = ("convergence", "scaling", "bias", "variance")


class SchemaError(ValueError):
    """An input file is missing a required column or field."""


@dataclass(frozen=True)
class PlotSpec:
    input_dir: str
    kind: str
    output: str
    logy: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SchemaError(f"unknown figure kind {self.kind!r}; expected one of {KINDS}")


def fmt(v: float) -> str:
    return format(float(v), ".17g")


def _read_csv(path: Path, required: tuple[str, ...]) -> list[dict]:
    if not path.exists():
        raise SchemaError(f"missing input file {path.name}")
    with open(path) as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise SchemaError(f"{path.name}: no header row")
        for col in required:
            if col not in reader.fieldnames:
                raise SchemaError(f"{path.name}: missing column {col!r}")
        rows = list(reader)
    if not rows:
        raise SchemaError(f"{path.name}: no data rows")
    return rows


def _read_summary(folder: Path) -> dict:
    path = folder / "summary.json"
    if not path.exists():
        raise SchemaError("missing input file summary.json")
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("kind", "spec"):
        if key not in doc:
            raise SchemaError(f"summary.json: missing field {key!r}")
    return doc


def _loglog_slope(xs, ys) -> float:
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


# ---------------------------------------------------------------------------
# Kind-specific builders. Each returns the caption lines (list of strings).
# ---------------------------------------------------------------------------

def _plot_convergence(folder: Path, ax, logy: bool) -> list[str]:
    doc = _read_summary(folder)
    spec = doc["spec"]
    methods = spec["methods"]
    seeds = spec["seeds"]
    caption = [f"convergence dim={spec['dims'][0]} sigma={fmt(spec['noise_sigma'])} "
               f"seeds={','.join(str(s) for s in seeds)}"]
    for method in methods:
        curves = []
        for seed in seeds:
            rows = _read_csv(folder / f"convergence_{method}_seed{seed}.csv",
                             ("t", "F_true"))
            t = [int(r["t"]) for r in rows if r["F_true"] not in ("", "nan")]
            f = [float(r["F_true"]) for r in rows if r["F_true"] not in ("", "nan")]
            if not t:
                raise SchemaError(f"convergence_{method}_seed{seed}.csv: no F_true samples")
            curves.append((np.array(t), np.array(f)))
        grid = curves[0][0]
        vals = np.array([np.interp(grid, t, f) for t, f in curves])
        ax.plot(grid, vals.mean(axis=0), label=method)
        ax.fill_between(grid, vals.min(axis=0), vals.max(axis=0), alpha=0.25)
        table = doc.get("final_loss_table", {}).get(method, {})
        for seed in seeds:
            if str(seed) not in table:
                raise SchemaError(f"summary.json: missing final_loss_table[{method}][{seed}]")
            caption.append(f"final_loss {method} seed{seed} {fmt(table[str(seed)])}")
    ax.set_xlabel("iteration")
    ax.set_ylabel("true objective")
    if logy:
        ax.set_yscale("log")
    ax.legend()
    return caption


def _plot_scaling(folder: Path, ax, logy: bool) -> list[str]:
    rows = _read_csv(folder / "scaling.csv",
                     ("method", "dim", "seed", "median_iter_seconds"))
    doc = _read_summary(folder)
    methods = doc["spec"]["methods"]
    dims = sorted({int(r["dim"]) for r in rows})
    caption = [f"scaling dims={','.join(str(d) for d in dims)}"]
    for method in methods:
        med = []
        for d in dims:
            vals = [float(r["median_iter_seconds"]) for r in rows
                    if r["method"] == method and int(r["dim"]) == d]
            if not vals:
                raise SchemaError(f"scaling.csv: no rows for method {method!r} dim {d}")
            med.append(float(np.median(vals)))
        slope = _loglog_slope(dims, med)
        ax.loglog(dims, med, marker="o", label=f"{method} (slope {slope:.2f})")
        caption.append(f"fitted_exponent {method} {fmt(slope)}")
    ax.set_xlabel("dimension")
    ax.set_ylabel("seconds per iteration")
    ax.legend()
    return caption


def _plot_bias(folder: Path, ax, logy: bool) -> list[str]:
    rows = _read_csv(folder / "cells.csv", ("seed", "alpha", "bias_norm"))
    seeds = sorted({r["seed"] for r in rows})
    caption = ["bias versus accuracy parameter"]
    for seed in seeds:
        sub = [(float(r["alpha"]), float(r["bias_norm"])) for r in rows if r["seed"] == seed]
        sub.sort()
        alphas = [a for a, _ in sub]
        biases = [b for _, b in sub]
        slope = _loglog_slope(alphas, biases)
        ax.loglog(alphas, biases, marker="o", label=f"seed {seed} (slope {slope:.2f})")
        caption.append(f"bias_slope seed{seed} {fmt(slope)}")
    ax.set_xlabel("alpha")
    ax.set_ylabel("bias norm")
    ax.legend()
    return caption


def _plot_variance(folder: Path, ax, logy: bool) -> list[str]:
    rows = _read_csv(folder / "cells.csv", ("seed", "N_g", "variance"))
    seeds = sorted({r["seed"] for r in rows})
    caption = ["estimate variance versus batch size"]
    for seed in seeds:
        sub = sorted((int(r["N_g"]), float(r["variance"])) for r in rows if r["seed"] == seed)
        ngs = np.array([n for n, _ in sub], dtype=float)
        var = np.array([v for _, v in sub])
        ax.loglog(1.0 / ngs, var, marker="o", label=f"seed {seed}")
        # 1/N_g reference anchored at the largest batch.
        ref = var[-1] * (ngs[-1] / ngs)
        ax.loglog(1.0 / ngs, ref, linestyle="--", alpha=0.6,
                  label=f"seed {seed} 1/N_g reference")
        for n, v in sub:
            caption.append(f"variance seed{seed} N_g={n} {fmt(v)}")
    ax.set_xlabel("1 / N_g")
    ax.set_ylabel("trace variance")
    ax.legend()
    return caption


_BUILDERS = {
    "convergence": _plot_convergence,
    "scaling": _plot_scaling,
    "bias": _plot_bias,
    "variance": _plot_variance,
}


def plot(spec: PlotSpec) -> tuple[Path, Path]:
    """Render one figure plus its caption file; returns (image, caption) paths.

    Read-only over the input directory; the caption is deterministic so
    reruns produce byte-identical text.
    """
    folder = Path(spec.input_dir)
    out_img = Path(spec.output)
    out_img.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    try:
        try:
            caption = _BUILDERS[spec.kind](folder, ax, spec.logy)
        except KeyError as exc:
            raise SchemaError(f"summary.json: missing field {exc}") from exc
        fig.tight_layout()
        fig.savefig(out_img, dpi=120)
    finally:
        plt.close(fig)
    out_caption = out_img.with_suffix(out_img.suffix + ".caption.txt")
    out_caption.write_text("\n".join(caption) + "\n")
    return out_img, out_caption
