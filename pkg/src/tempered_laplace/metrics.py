"""Monte-Carlo posterior predictive and test metrics (0-1, NLL, ECE)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .laplace import TemperedPosterior, sample_weight_matrix
from .nn import Dataset, ModelParams, forward_batch, log_softmax, softmax

PROB_FLOOR = 1e-12
DEFAULT_BINS = 15


@dataclass(frozen=True)
class PredictiveResult:
    probs: np.ndarray
    num_mc_samples: int
    seed: int

    def __post_init__(self):
        if self.num_mc_samples < 1:
            raise ValueError("num_mc_samples must be at least 1")


@dataclass(frozen=True)
class MetricTriple:
    zero_one: float
    nll: float
    ece: float
    per_bin: tuple  # (confidence, accuracy, count) per bin


def _sample_outputs(post: TemperedPosterior, X: np.ndarray, num_samples: int, seed: int):
    arch = post.mean.arch
    for w in sample_weight_matrix(post, seed, num_samples):
        yield forward_batch(ModelParams(w, arch), X)


def posterior_predictive(post: TemperedPosterior, data: Dataset, num_samples: int = 100,
                         seed: int = 0) -> PredictiveResult:
    """``(1/S) sum_s softmax(f(x; w_s))`` with ``w_s`` drawn from the posterior."""
    if num_samples < 1:
        raise ValueError("num_samples must be at least 1")
    acc = np.zeros((data.n, post.mean.arch.output_dim))
    for out in _sample_outputs(post, data.inputs, num_samples, seed):
        acc += softmax(out)
    return PredictiveResult(acc / num_samples, num_samples, seed)


def deterministic_predictive(params: ModelParams, data: Dataset) -> PredictiveResult:
    return PredictiveResult(softmax(forward_batch(params, data.inputs)), 1, 0)


def gibbs_zero_one(post: TemperedPosterior, data: Dataset, num_samples: int = 100,
                   seed: int = 0) -> float:
    """MC estimate of ``E_{w ~ posterior}`` of the 0-1 loss on ``data``."""
    total = 0.0
    y = data.targets
    for out in _sample_outputs(post, data.inputs, num_samples, seed):
        total += np.mean(np.argmax(out, axis=1) != y)
    return float(total / num_samples)


def expected_sample_nll(post: TemperedPosterior, data: Dataset, num_samples: int = 100,
                        seed: int = 0) -> float:
    """``E_{w ~ posterior}`` of the mean NLL, labels averaged under ``p_D(y|x)``."""
    pd = data.conditional()
    total = 0.0
    for out in _sample_outputs(post, data.inputs, num_samples, seed):
        total += -np.sum(pd * log_softmax(out)) / data.n
    return float(total / num_samples)


def _bin_edges(num_bins: int, num_classes: int) -> np.ndarray:
    # max-probability confidence lives in [1/K, 1]
    return np.linspace(1.0 / num_classes, 1.0, num_bins + 1)


def evaluate(pred: PredictiveResult, data: Dataset, num_bins: int = DEFAULT_BINS) -> MetricTriple:
    if num_bins < 1:
        raise ValueError("num_bins must be at least 1")
    probs = pred.probs
    y = np.asarray(data.targets, dtype=np.intp)
    n, K = probs.shape
    pred_label = np.argmax(probs, axis=1)
    correct = pred_label == y
    zero_one = float(np.mean(~correct))
    nll = float(np.mean(-np.log(np.maximum(probs[np.arange(n), y], PROB_FLOOR))))
    conf = probs[np.arange(n), pred_label]
    edges = _bin_edges(num_bins, K)
    which = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, num_bins - 1)
    per_bin = []
    ece = 0.0
    for b in range(num_bins):
        mask = which == b
        cnt = int(mask.sum())
        if cnt == 0:
            per_bin.append((0.0, 0.0, 0))
            continue
        c = float(conf[mask].mean())
        a = float(correct[mask].mean())
        per_bin.append((c, a, cnt))
        ece += cnt / n * abs(a - c)
    return MetricTriple(zero_one, nll, float(ece), tuple(per_bin))


def ece_from_bins(per_bin) -> float:
    n = sum(c for _, _, c in per_bin)
    return float(sum(c / n * abs(a - conf) for conf, a, c in per_bin if c))


def predictive_relative_entropy(pred: PredictiveResult, data: Dataset) -> float:
    """``E_x sum_y p_D(y|x) [ln p_D(y|x) - ln predictive(y|x)]`` over the rows."""
    if data.true_conditional is None:
        raise ValueError(f"dataset {data.name!r} has no true conditional; "
                         "relative entropy is unsupported")
    pd = data.conditional()
    q = np.maximum(pred.probs, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pd > 0, pd * (np.log(pd) - np.log(q)), 0.0)
    return float(max(terms.sum() / data.n, 0.0))


def conditional_neg_entropy(data: Dataset) -> float:
    """``E_{x,y}[ln p_D(y|x)]`` averaged analytically over labels."""
    pd = data.conditional()
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.where(pd > 0, pd * np.log(pd), 0.0).sum() / data.n)


def jensen_chain(post: TemperedPosterior, data: Dataset, num_samples: int = 100,
                 seed: int = 0) -> tuple:
    """``(relative entropy, E_f[mean NLL] + E[ln p_D])`` from shared weight samples."""
    pred = posterior_predictive(post, data, num_samples, seed)
    lhs = predictive_relative_entropy(pred, data)
    rhs = expected_sample_nll(post, data, num_samples, seed) + conditional_neg_entropy(data)
    return lhs, rhs

