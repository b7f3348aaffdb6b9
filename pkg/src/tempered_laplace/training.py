"""MAP estimation by minibatch SGD on the prior-regularized empirical NLL."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .nn import (
    Dataset,
    LossKind,
    MlpArchitecture,
    ModelParams,
    batch_losses,
    default_loss,
    grad_batch_loss,
    init_params,
)


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, seed: Optional[int] = None):
        self.epoch = epoch
        self.seed = seed
        where = f" (seed {seed})" if seed is not None else ""
        super().__init__(f"training diverged at epoch {epoch}{where}")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 64
    prior_variance: float = 1.0
    seed: int = 0
    likelihood_variance: float = 1.0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.prior_variance > 0 or not self.likelihood_variance > 0:
            raise ValueError("variances must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class MapEstimate:
    params: ModelParams
    train_nll: float
    train_zero_one: float
    config: TrainConfig


def map_objective(params: ModelParams, data: Dataset, prior_variance: float,
                  prior_mean=None, kind: Optional[LossKind] = None) -> float:
    """``mean NLL + ||w - w_prior||^2 / (2 n prior_variance)``."""
    kind = kind or default_loss(params.arch)
    w0 = 0.0 if prior_mean is None else np.asarray(prior_mean)
    nll = batch_losses(params, data.inputs, data.targets, kind).mean()
    return float(nll + np.sum((params.weights - w0) ** 2) / (2 * data.n * prior_variance))


def map_gradient(params: ModelParams, data: Dataset, prior_variance: float,
                 prior_mean=None, kind: Optional[LossKind] = None) -> np.ndarray:
    kind = kind or default_loss(params.arch)
    w0 = 0.0 if prior_mean is None else np.asarray(prior_mean)
    g = grad_batch_loss(params, data.inputs, data.targets, kind)
    return g + (params.weights - w0) / (data.n * prior_variance)


def train_metrics(params: ModelParams, data: Dataset, likelihood_variance: float = 1.0):
    kind = default_loss(params.arch, likelihood_variance)
    nll = float(batch_losses(params, data.inputs, data.targets, kind).mean())
    if params.arch.output_head == "gaussian":
        return nll, float("nan")
    zo = float(batch_losses(params, data.inputs, data.targets, LossKind.zero_one()).mean())
    return nll, zo


def train_map(arch: MlpArchitecture, data: Dataset, config: TrainConfig,
              prior_mean=None, init: Optional[ModelParams] = None) -> MapEstimate:
    """SGD with classical momentum on the MAP objective.

    The data term is stepped explicitly; the Gaussian prior penalty is applied
    through its exact proximal map so that tiny prior variances stay stable.
    The proximal step uses the momentum-amplified step size ``lr / (1 - momentum)``
    so that fixed points are exact stationary points of the MAP objective.
    """
    rng = np.random.default_rng(config.seed)
    params = init if init is not None else init_params(arch, rng)
    kind = default_loss(arch, config.likelihood_variance)
    w = params.weights.copy()
    w0 = np.zeros_like(w) if prior_mean is None else np.asarray(prior_mean, dtype=np.float64)
    n = data.n
    lr = config.learning_rate
    shrink = 1.0 / (1.0 + lr / ((1.0 - config.momentum) * n * config.prior_variance))
    velocity = np.zeros_like(w)
    bs = min(config.batch_size, n)
    # overflow is caught by the finiteness checks below
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                g = grad_batch_loss(params, data.inputs[idx], data.targets[idx], kind)
                if not np.all(np.isfinite(g)):
                    raise DivergenceError(epoch)
                velocity = config.momentum * velocity - lr * g
                w = w0 + (w + velocity - w0) * shrink
                if not np.all(np.isfinite(w)):
                    raise DivergenceError(epoch)
                params = ModelParams(w, arch)
            if not np.isfinite(batch_losses(params, data.inputs, data.targets, kind).mean()):
                raise DivergenceError(epoch)
    nll, zo = train_metrics(params, data, config.likelihood_variance)
    return MapEstimate(params, nll, zo, config)


def _train_one(args):
    arch, data, config, prior_mean = args
    try:
        return train_map(arch, data, config, prior_mean)
    except DivergenceError as err:
        raise DivergenceError(err.epoch, config.seed) from err


def seed_farm(arch: MlpArchitecture, data: Dataset, config: TrainConfig, num_seeds: int,
              prior_mean=None, jobs: int = 1) -> list:
    """One MAP estimate per seed ``config.seed + i``, ordered by seed."""
    if num_seeds < 1:
        raise ValueError("num_seeds must be at least 1")
    tasks = [(arch, data, replace(config, seed=config.seed + i), prior_mean)
             for i in range(num_seeds)]
    if jobs == 1:
        return [_train_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_train_one, tasks))


def filter_similar(estimates: list, tolerance: float = 0.02):
    """Split estimates into (kept, rejected) by distance of train 0-1 to the median."""
    errs = np.array([e.train_zero_one for e in estimates])
    if np.all(np.isnan(errs)):
        return list(estimates), []
    med = np.median(errs)
    kept = [e for e, r in zip(estimates, errs) if abs(r - med) <= tolerance + 1e-12]
    rejected = [e for e, r in zip(estimates, errs) if abs(r - med) > tolerance + 1e-12]
    return kept, rejected
