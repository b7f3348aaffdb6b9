"""Experiment drivers behind the command-line interface.

Every driver takes an :class:`ExperimentConfig`, reads and writes files under
``config.output_dir`` and returns the rows it wrote, so the same code paths are
usable from tests without a subprocess.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml
from scipy.stats import spearmanr

from . import plotting
from .bounds import (
    InadmissibleTemperatureError,
    evaluate_bound_pipeline,
    generate_world_data,
    make_world,
    mc_true_risk,
    proposition_bound,
    world_posterior_variance,
    world_statistics,
)
from .data import load_idx_dataset, make_blobs, make_spirals, split_dataset
from .laplace import (
    fit_tempered_posterior,
    gaussian_kl,
    ggn_trace,
    kfac_factors,
    select_prior_variance,
)
from .metrics import evaluate, gibbs_zero_one, posterior_predictive
from .nn import Dataset, LossKind, MlpArchitecture, batch_losses
from .storage import load_map, save_map, save_posterior
from .training import TrainConfig, filter_similar, seed_farm

log = logging.getLogger(__name__)

SWEEP_HEADER = ["seed", "lambda", "split", "zero_one", "nll", "ece", "kl", "bound_value",
                "wall_time_ms"]


class ConfigError(ValueError):
    pass


def default_lambda_grid(num: int = 30, lo: float = 1e-7, hi: float = 1e4) -> list:
    return [float(v) for v in np.logspace(math.log10(lo), math.log10(hi), num)]


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: {"kind": "blobs", "n": 3000, "seed": 0})
    split: tuple = (0.5, 0.25, 0.25)
    split_seed: int = 0
    hidden: tuple = (32, 32)
    activation: str = "relu"
    train: dict = field(default_factory=dict)
    lambda_grid: list = field(default_factory=default_lambda_grid)
    bound_lambda_grid: list = field(default_factory=lambda: default_lambda_grid(20, 1e-7, 1.0))
    num_seeds: int = 10
    num_mc_samples: int = 100
    mc_seed: int = 0
    prior_policy: str = "fixed"
    prior_variance: float = 0.1
    prior_grid: list = field(default_factory=lambda: [float(v) for v in np.logspace(-4, 2, 13)])
    posterior: str = "kfac"
    delta: float = 0.05
    num_bins: int = 15
    output_dir: str = "out"
    timing: bool = False
    save_posteriors: bool = True
    filter_tolerance: float = 0.02
    world: dict = field(default_factory=dict)

    def __post_init__(self):
        self.split = tuple(float(v) for v in self.split)
        fr = np.asarray(self.split)
        if fr.shape != (3,) or np.any(fr <= 0) or abs(fr.sum() - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be three positive numbers summing to 1, got {self.split}")
        self.lambda_grid = _parse_grid(self.lambda_grid, "lambda_grid")
        self.bound_lambda_grid = _parse_grid(self.bound_lambda_grid, "bound_lambda_grid")
        if self.prior_policy not in ("fixed", "marginal_likelihood"):
            raise ConfigError(f"unknown prior policy {self.prior_policy!r}")
        if not self.prior_variance > 0:
            raise ConfigError("prior_variance must be positive")
        if self.posterior not in ("isotropic", "kfac"):
            raise ConfigError(f"unknown posterior kind {self.posterior!r}")
        if not 0 < self.delta <= 1:
            raise ConfigError("delta must lie in (0, 1]")
        if self.num_seeds < 1 or self.num_mc_samples < 1 or self.num_bins < 1:
            raise ConfigError("num_seeds, num_mc_samples and num_bins must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)
        try:
            self.train_config(0)
        except ValueError as err:
            raise ConfigError(str(err)) from err

    def train_config(self, seed_offset: int = 0) -> TrainConfig:
        cfg = TrainConfig(**self.train)
        return replace(cfg, seed=cfg.seed + seed_offset)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


def _parse_grid(spec, name: str) -> list:
    if isinstance(spec, dict):
        try:
            grid = default_lambda_grid(int(spec["num"]), float(spec["min"]), float(spec["max"]))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigError(f"{name}: expected keys min, max, num") from err
    else:
        grid = [float(v) for v in spec]
    if not grid:
        raise ConfigError(f"{name} is empty")
    if any(not (v > 0) or not math.isfinite(v) for v in grid):
        raise ConfigError(f"{name} must contain positive finite temperatures, got {grid}")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ConfigError(f"{name} must be sorted ascending without repeats")
    return grid


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-7`` style numbers as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*)(?:\.[0-9_]*)?[eE][-+]?[0-9]+$"),
    list("-+0123456789"),
)


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        raw = parse_yaml(p.read_text(encoding="utf-8")) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
    for key, value in (overrides or {}).items():
        _set_dotted(raw, key, value)
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return ExperimentConfig(**raw)


def _set_dotted(d: dict, key: str, value):
    parts = key.split(".")
    for p in parts[:-1]:
        d = d.setdefault(p, {})
    d[parts[-1]] = value


# -- data -------------------------------------------------------------------------


def build_dataset(config: ExperimentConfig) -> Dataset:
    spec = dict(config.dataset)
    kind = spec.pop("kind", "blobs")
    if kind == "blobs":
        return make_blobs(int(spec.pop("n", 3000)), int(spec.pop("seed", 0)), **spec)
    if kind == "spirals":
        return make_spirals(int(spec.pop("n", 3000)), int(spec.pop("seed", 0)), **spec)
    if kind == "idx":
        try:
            images, labels = spec.pop("images"), spec.pop("labels")
        except KeyError as err:
            raise ConfigError("idx dataset needs 'images' and 'labels' paths") from err
        spec.pop("seed", None)
        return load_idx_dataset(images, labels, spec.pop("subset", None),
                                spec.pop("normalization", "unit"), **spec)
    raise ConfigError(f"unknown dataset kind {kind!r}")


def build_splits(config: ExperimentConfig):
    data = build_dataset(config)
    return split_dataset(data, config.split, config.split_seed)


def build_arch(config: ExperimentConfig, data: Dataset) -> MlpArchitecture:
    return MlpArchitecture((data.inputs.shape[1], *config.hidden, data.num_classes),
                           config.activation, "softmax_categorical")


# -- train-map ----------------------------------------------------------------------


def map_path(config: ExperimentConfig, seed: int) -> Path:
    return config.out / "maps" / f"map_seed{seed:04d}.bin"


def run_train_map(config: ExperimentConfig, jobs: int = 1) -> dict:
    train, val, test = build_splits(config)
    arch = build_arch(config, train)
    tc = config.train_config()
    estimates = seed_farm(arch, train, tc, config.num_seeds, jobs=jobs)
    kept, rejected = filter_similar(estimates, config.filter_tolerance)
    (config.out / "maps").mkdir(parents=True, exist_ok=True)
    entries = []
    for est in estimates:
        path = map_path(config, est.config.seed)
        save_map(path, est)
        entries.append({"seed": est.config.seed, "file": path.name, "train_nll": est.train_nll,
                        "train_zero_one": est.train_zero_one})
    manifest = {
        "dataset": train.name.rsplit("-", 1)[0],
        "arch": arch.to_dict(),
        "seeds": [e.config.seed for e in estimates],
        "maps": entries,
        "rejected_seeds": [e.config.seed for e in rejected],
        "kept_seeds": [e.config.seed for e in kept],
    }
    (config.out / "maps" / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for e in rejected:
        log.warning("seed %d rejected: train 0-1 %.4f too far from the seed median",
                    e.config.seed, e.train_zero_one)
    return manifest


def load_maps(config: ExperimentConfig, kept_only: bool = False) -> list:
    manifest_path = config.out / "maps" / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no MAP manifest at {manifest_path}; run train-map first")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    seeds = manifest["kept_seeds"] if kept_only else manifest["seeds"]
    return [load_map(map_path(config, s)) for s in seeds]


# -- sweep --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return repr(float(v))


def write_csv(path: Path, header: list, rows: list):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(row.get(h)) for h in header])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _prior_variance_for(config: ExperimentConfig, est, train: Dataset, curvature) -> float:
    if config.prior_policy == "fixed":
        return config.prior_variance
    return select_prior_variance(est, train, config.prior_grid, curvature=curvature)


def _sweep_seed(args) -> list:
    config, est, splits = args
    train, val, test = splits
    t0 = time.perf_counter()
    if config.posterior == "kfac":
        curv = kfac_factors(est, train)
    else:
        curv = ggn_trace(est, train)
    sp = _prior_variance_for(config, est, train, curv)
    setup_ms = (time.perf_counter() - t0) * 1e3
    seed = est.config.seed
    rows = []
    for li, lam in enumerate(config.lambda_grid):
        t0 = time.perf_counter()
        post = fit_tempered_posterior(est, curv, lam, sp, config.posterior)
        kl = gaussian_kl(post, np.zeros(post.d), sp)
        if config.save_posteriors:
            path = config.out / "posteriors" / f"post_seed{seed:04d}_lam{li:03d}.bin"
            path.parent.mkdir(parents=True, exist_ok=True)
            save_posterior(path, post)
        for split_name, data in (("validation", val), ("test", test)):
            pred = posterior_predictive(post, data, config.num_mc_samples, config.mc_seed)
            m = evaluate(pred, data, config.num_bins)
            elapsed = (time.perf_counter() - t0) * 1e3 + (setup_ms if li == 0 else 0.0)
            rows.append({"seed": seed, "lambda": lam, "split": split_name,
                         "zero_one": m.zero_one, "nll": m.nll, "ece": m.ece, "kl": kl,
                         "bound_value": None,
                         "wall_time_ms": round(elapsed, 3) if config.timing else 0})
    return rows


def _map_cells(fn, tasks, jobs: int) -> list:
    if jobs == 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def run_sweep(config: ExperimentConfig, jobs: int = 1) -> list:
    """Metric triple per (seed, lambda, split); writes sweep.csv and figures."""
    splits = build_splits(config)
    maps = load_maps(config)
    per_seed = _map_cells(_sweep_seed, [(config, est, splits) for est in maps], jobs)
    rows = [r for seed_rows in per_seed for r in seed_rows]
    rows.sort(key=lambda r: (r["seed"], r["lambda"], r["split"] != "validation"))
    write_csv(config.out / "sweep.csv", SWEEP_HEADER, rows)
    plotting.plot_sweep(read_csv(config.out / "sweep.csv"), config.out)
    return rows


# -- map-variability ----------------------------------------------------------------


def run_map_variability(config: ExperimentConfig, lambda_grid: Optional[list] = None,
                        jobs: int = 1) -> dict:
    """Spread across MAP seeds of the posterior-predictive test 0-1 loss per temperature.

    Every MAP shares the same Monte-Carlo draws (``config.mc_seed``), so the
    spread reflects the posteriors rather than sampling noise.
    """
    grid = _parse_grid(lambda_grid, "lambda grid") if lambda_grid is not None else config.lambda_grid
    train, val, test = build_splits(config)
    maps = load_maps(config, kept_only=True)
    if len(maps) < 2:
        raise ConfigError("map-variability needs at least two MAP seeds")
    curvs = [ggn_trace(est, train) for est in maps]
    map_errors = _map_test_errors(maps, test)
    rows = []
    for lam in grid:
        errs = []
        for est, curv in zip(maps, curvs):
            post = fit_tempered_posterior(est, curv, lam, config.prior_variance, "isotropic")
            pred = posterior_predictive(post, test, config.num_mc_samples, config.mc_seed)
            errs.append(evaluate(pred, test, config.num_bins).zero_one)
        rows.append({"lambda": lam, "mean_zero_one": float(np.mean(errs)),
                     "std_zero_one": float(np.std(errs))})
    write_csv(config.out / "map_variability.csv", ["lambda", "mean_zero_one", "std_zero_one"], rows)
    summary = {"map_test_zero_one": map_errors, "map_std_zero_one": float(np.std(map_errors)),
               "seeds": [est.config.seed for est in maps], "prior_variance": config.prior_variance}
    (config.out / "map_variability_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    plotting.plot_map_variability(read_csv(config.out / "map_variability.csv"),
                                  config.out / "map_variability.svg")
    return {"rows": rows, **summary}


def _map_test_errors(maps: list, test: Dataset) -> list:
    return [float(batch_losses(est.params, test.inputs, test.targets, LossKind.zero_one()).mean())
            for est in maps]


# -- bound-curve --------------------------------------------------------------------

BOUND_HEADER = ["seed", "lambda", "delta", "empirical_zero_one", "kl", "bound_value",
                "test_zero_one", "vacuous"]


def run_bound_curve(config: ExperimentConfig, jobs: int = 1) -> dict:
    """Catoni bound on the validation split next to the test Gibbs 0-1 loss.

    The MAP (trained on the train split only) is both prior and posterior mean.
    """
    train, val, test = build_splits(config)
    if val.n < 1:
        raise ConfigError("validation split is empty")
    maps = load_maps(config)
    rows, summary = [], []
    for est in maps:
        curv = ggn_trace(est, val)
        reports = evaluate_bound_pipeline(est, curv, val, config.bound_lambda_grid,
                                          config.prior_variance, config.delta,
                                          config.num_mc_samples, config.mc_seed)
        tests = []
        for rep in reports:
            post = fit_tempered_posterior(est, curv, rep.lam, config.prior_variance, "isotropic")
            t = gibbs_zero_one(post, test, config.num_mc_samples, config.mc_seed)
            tests.append(t)
            rows.append({"seed": est.config.seed, "lambda": rep.lam, "delta": rep.delta,
                         "empirical_zero_one": rep.empirical_risk, "kl": rep.kl,
                         "bound_value": rep.value, "test_zero_one": t,
                         "vacuous": int(rep.vacuous)})
        values = [r.value for r in reports]
        if np.ptp(values) == 0 or np.ptp(tests) == 0:
            log.warning("seed %d: rank correlation undefined for a constant column", est.config.seed)
            rho = float("nan")
        else:
            rho = spearmanr(values, tests).correlation
        summary.append({"seed": est.config.seed, "spearman": float(rho)})
    write_csv(config.out / "bound_curve.csv", BOUND_HEADER, rows)
    write_csv(config.out / "bound_curve_summary.csv", ["seed", "spearman"], summary)
    plotting.plot_bound_curve(read_csv(config.out / "bound_curve.csv"),
                              config.out / "bound_curve.svg")
    return {"rows": rows, "summary": summary}


# -- prop-bound ---------------------------------------------------------------------

PROP_HEADER = ["world_seed", "lambda", "admissible", "bound_value", "mc_risk", "violated"]


def world_settings(config: ExperimentConfig) -> dict:
    w = {"d": 2, "n": 50, "prior_variance": 1.0, "noise_variance": 1.0,
         "likelihood_variance": 1.0, "grad_variances": [0.001], "phis": [1.0], "mus": None,
         "num_worlds": 100, "num_weight_samples": 10_000, "delta": config.delta,
         "lambda_fractions": [1e-3, 1e-2, 0.1, 0.5, 0.9, 0.99, 0.999, 1.0, 1.5]}
    w.update(config.world)
    return w


def run_prop_bound(config: ExperimentConfig, jobs: int = 1) -> dict:
    """Closed-form bound against the Monte-Carlo true risk over redrawn worlds.

    Temperatures are given either as ``lambdas`` or as ``lambda_fractions`` of
    ``1/c``; grid points at or above ``1/c`` produce inadmissible rows.
    """
    w = world_settings(config)
    rows = []
    for k in range(int(w["num_worlds"])):
        world = make_world(w["d"], w["n"], w["prior_variance"], w["noise_variance"],
                           w["likelihood_variance"], w["grad_variances"], w["phis"],
                           None if w["mus"] is None else np.asarray(w["mus"], float), seed=k)
        grads, base, labels = generate_world_data(world, seed=10_000 + k)
        resid, h = world_statistics(world, grads, base, labels)
        lambdas = w.get("lambdas") or [f / world.c for f in w["lambda_fractions"]]
        for lam in lambdas:
            row = {"world_seed": k, "lambda": lam}
            try:
                rep = proposition_bound(world, resid, h, lam, w["delta"])
            except InadmissibleTemperatureError:
                row.update(admissible=0)
                rows.append(row)
                continue
            v = world_posterior_variance(world, h, lam)
            risk = mc_true_risk(world, v, int(w["num_weight_samples"]), seed=20_000 + k)
            row.update(admissible=1, bound_value=rep.value, mc_risk=risk,
                       violated=int(rep.value < risk))
            rows.append(row)
    write_csv(config.out / "prop_bound.csv", PROP_HEADER, rows)
    return {"rows": rows, "settings": {k: v for k, v in w.items() if k != "mus"}}
