"""SVG figures drawn from the CSV rows written by the experiment drivers."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp, so reruns produce identical files
plt.rcParams["svg.hashsalt"] = "tempered-laplace"
plt.rcParams["svg.fonttype"] = "none"
SVG_METADATA = {"Date": None, "Creator": None}

METRIC_LABELS = {"zero_one": "0-1 loss", "nll": "negative log-likelihood", "ece": "ECE"}


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=SVG_METADATA)
    plt.close(fig)


def _mark_unit_temperature(ax):
    ax.axvline(1.0, color="0.5", linestyle=":", linewidth=1, label="lambda = 1")


def plot_sweep(rows: list, out_dir: Path, split: str = "test") -> list:
    """One figure per metric: every seed in a thin line, the seed mean in bold."""
    by_seed = defaultdict(list)
    for r in rows:
        if r["split"] == split:
            by_seed[int(r["seed"])].append(r)
    paths = []
    for metric, label in METRIC_LABELS.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        traces = []
        for seed in sorted(by_seed):
            seed_rows = sorted(by_seed[seed], key=lambda r: float(r["lambda"]))
            lam = np.array([float(r["lambda"]) for r in seed_rows])
            vals = np.array([float(r[metric]) for r in seed_rows])
            ax.plot(lam, vals, color="tab:blue", alpha=0.3, linewidth=0.8)
            traces.append(vals)
        if traces and all(len(t) == len(traces[0]) for t in traces):
            ax.plot(lam, np.mean(traces, axis=0), color="tab:blue", linewidth=2, label="seed mean")
        _mark_unit_temperature(ax)
        ax.set_xscale("log")
        ax.set_xlabel("lambda")
        ax.set_ylabel(f"{split} {label}")
        ax.legend(loc="best", fontsize=8)
        fig.tight_layout()
        path = Path(out_dir) / f"sweep_{metric}.svg"
        _save(fig, path)
        paths.append(path)
    return paths


def plot_map_variability(rows: list, path: Path):
    lam = np.array([float(r["lambda"]) for r in rows])
    mean = np.array([float(r["mean_zero_one"]) for r in rows])
    std = np.array([float(r["std_zero_one"]) for r in rows])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(lam, mean, color="tab:blue", label="mean over MAP seeds")
    ax.fill_between(lam, mean - std, mean + std, color="tab:blue", alpha=0.25, label="+/- 1 std")
    _mark_unit_temperature(ax)
    ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("test 0-1 loss")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, Path(path))


def plot_bound_curve(rows: list, path: Path):
    by_seed = defaultdict(list)
    for r in rows:
        by_seed[int(r["seed"])].append(r)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, seed in enumerate(sorted(by_seed)):
        seed_rows = sorted(by_seed[seed], key=lambda r: float(r["lambda"]))
        lam = [float(r["lambda"]) for r in seed_rows]
        ax.plot(lam, [float(r["bound_value"]) for r in seed_rows], color="tab:red", alpha=0.7,
                label="Catoni bound" if i == 0 else None)
        ax.plot(lam, [float(r["test_zero_one"]) for r in seed_rows], color="tab:blue", alpha=0.7,
                label="test 0-1 loss" if i == 0 else None)
    _mark_unit_temperature(ax)
    ax.set_xscale("log")
    ax.set_xlabel("lambda")
    ax.set_ylabel("0-1 loss")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, Path(path))
