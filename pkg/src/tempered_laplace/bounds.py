"""PAC-Bayes bounds: Catoni, Alquier (Hoeffding moment surrogate) and the
closed-form bound for a linearized network in a Gaussian-mixture gradient world.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .laplace import (
    CurvatureSummary,
    fit_tempered_posterior,
    gaussian_kl_terms,
    ggn_trace,
)
from .metrics import gibbs_zero_one
from .nn import Dataset


class InadmissibleTemperatureError(ValueError):
    """Temperature outside ``(0, 1/c)`` for the closed-form bound."""

    def __init__(self, lam: float, c: float):
        self.lam = lam
        self.c = c
        super().__init__(f"lambda={lam!r} must be below 1/c with c={c!r} (1/c={1.0 / c!r})")


class UnboundedLossError(ValueError):
    """The Alquier bound is only implemented for losses with a finite range."""


@dataclass(frozen=True)
class BoundReport:
    bound_kind: str
    lam: float
    delta: float
    empirical_risk: float
    kl: float
    moment_or_complexity: float
    value: float
    n: int
    terms: dict = field(default_factory=dict)

    @property
    def vacuous(self) -> bool:
        return self.value >= 1.0 if self.bound_kind == "catoni" else False


def _check_common(lam: float, delta: float, n: int):
    if not lam > 0:
        raise ValueError(f"lambda must be positive, got {lam}")
    if not 0 < delta <= 1:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    if n < 1:
        raise ValueError("n must be positive")


def catoni_inverse(x: float, lam: float) -> float:
    """``(1 - exp(-lam x)) / (1 - exp(-lam))``."""
    return math.expm1(-lam * x) / math.expm1(-lam)


def _catoni_value(emp: float, kl: float, n: int, lam: float, delta: float) -> float:
    # lam * argument, formed without dividing by lam
    scaled = lam * emp + (kl + math.log(1.0 / delta)) / n
    return math.expm1(-scaled) / math.expm1(-lam)


def catoni_bound(empirical_zero_one: float, kl: float, n: int, lam: float,
                 delta: float) -> BoundReport:
    _check_common(lam, delta, n)
    if not 0 <= empirical_zero_one <= 1:
        raise ValueError("empirical 0-1 risk must lie in [0, 1]")
    if kl < 0:
        raise ValueError("KL must be non-negative")
    arg = empirical_zero_one + (kl + math.log(1.0 / delta)) / (lam * n)
    value = _catoni_value(empirical_zero_one, kl, n, lam, delta)
    return BoundReport("catoni", lam, delta, empirical_zero_one, kl, 0.0, value, n,
                       {"argument": arg})


def hoeffding_moment(lam: float, n: int, loss_range) -> float:
    a, b = loss_range
    return lam**2 * n * (b - a) ** 2 / 8.0


def alquier_bound(empirical_risk: float, kl: float, n: int, lam: float, delta: float,
                  loss_range=(0.0, 1.0)) -> BoundReport:
    """``empirical + (KL + ln(1/delta) + Psi) / (lam n)`` with Hoeffding's ``Psi``."""
    _check_common(lam, delta, n)
    if loss_range is None or not all(math.isfinite(v) for v in loss_range):
        raise UnboundedLossError("unbounded losses need a tail assumption on the moment term")
    a, b = loss_range
    if b < a:
        raise ValueError("loss range must satisfy a <= b")
    psi = hoeffding_moment(lam, n, loss_range)
    value = empirical_risk + (kl + math.log(1.0 / delta) + psi) / (lam * n)
    return BoundReport("alquier", lam, delta, empirical_risk, kl, psi, value, n,
                       {"loss_range": (a, b)})


def reassemble(report: BoundReport) -> float:
    """Recompute ``value`` from the stored terms."""
    lam, n, delta = report.lam, report.n, report.delta
    if report.bound_kind == "catoni":
        return _catoni_value(report.empirical_risk, report.kl, n, lam, delta)
    if report.bound_kind == "alquier":
        return report.empirical_risk + (report.kl + math.log(1.0 / delta)
                                        + report.moment_or_complexity) / (lam * n)
    t = report.terms
    return (report.empirical_risk + t["log_likelihood_constant"] + t["label_noise"]
            + report.moment_or_complexity
            + (report.kl + 2 * math.log(1.0 / delta)) / (lam * n))


# -- bound on held-out data with a prior mean from a disjoint split -------------------


def evaluate_bound_pipeline(model, curvature: Optional[CurvatureSummary], validation: Dataset,
                            lambda_grid: Sequence[float], prior_variance: float, delta: float,
                            num_mc_samples: int = 100, seed: int = 0) -> list:
    """Catoni bound per temperature with posterior mean equal to the prior mean.

    ``model`` must be trained without ``validation``; its weights serve as both
    prior and posterior mean, so the KL only carries the variance part.  The
    isotropic posterior is fitted on ``validation`` and its Gibbs 0-1 risk there
    is estimated with ``num_mc_samples`` weight draws (shared across the grid).
    """
    grid = sorted(float(v) for v in lambda_grid)
    if not grid:
        raise ValueError("lambda grid is empty")
    if any(v <= 0 for v in grid):
        raise ValueError("lambda grid values must be positive")
    if validation.n < 1:
        raise ValueError("validation split is empty")
    if curvature is None:
        curvature = ggn_trace(model, validation)
    params = getattr(model, "params", model)
    reports = []
    for lam in grid:
        post = fit_tempered_posterior(params, curvature, lam, prior_variance, "isotropic")
        emp = gibbs_zero_one(post, validation, num_mc_samples, seed)
        kl_terms = gaussian_kl_terms(post, params, prior_variance)
        rep = catoni_bound(emp, max(kl_terms["kl"], 0.0), validation.n, lam, delta)
        rep.terms.update(kl_mean=kl_terms["mean"], kl_variance=kl_terms["variance"],
                         posterior_variance=post.variance)
        reports.append(rep)
    return reports


# -- linearized Gaussian-mixture world ------------------------------------------------


@dataclass(frozen=True)
class SyntheticWorld:
    """Generative model for the closed-form bound.

    Per-sample gradients at the fixed posterior mean follow a Gaussian mixture
    with weights ``phis``, means ``mus`` and isotropic variances ``grad_variances``;
    labels are ``f(x; w_post) + g^T (w_star - w_post) + eps``.
    """

    n: int
    w_star: np.ndarray
    w_prior: np.ndarray
    w_post: np.ndarray
    prior_variance: float
    phis: np.ndarray
    mus: np.ndarray
    grad_variances: np.ndarray
    noise_variance: float
    likelihood_variance: float

    def __post_init__(self):
        for name in ("w_star", "w_prior", "w_post", "phis", "grad_variances"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        object.__setattr__(self, "mus", np.atleast_2d(np.asarray(self.mus, dtype=np.float64)))
        d = self.w_star.size
        if self.w_prior.size != d or self.w_post.size != d or self.mus.shape[1] != d:
            raise ValueError("world vectors must share the parameter dimension")
        if len(self.phis) != len(self.mus) or len(self.phis) != len(self.grad_variances):
            raise ValueError("mixture parameters must have one entry per component")
        if np.any(self.phis < 0) or abs(self.phis.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be non-negative and sum to 1")
        if np.any(self.grad_variances <= 0) or not (
                self.prior_variance > 0 and self.noise_variance > 0 and self.likelihood_variance > 0):
            raise ValueError("all variances must be positive")
        if self.n < 1:
            raise ValueError("n must be positive")

    @property
    def d(self) -> int:
        return self.w_star.size

    @property
    def grad_variance(self) -> float:
        """Mixture-averaged gradient variance ``sum_j phi_j sigma_j^2``."""
        return float(np.dot(self.phis, self.grad_variances))

    @property
    def c(self) -> float:
        return 2 * self.n * self.grad_variance * self.prior_variance

    def gradient_second_moment(self) -> np.ndarray:
        d = self.d
        M = np.zeros((d, d))
        for phi, mu, s2 in zip(self.phis, self.mus, self.grad_variances):
            M += phi * (np.outer(mu, mu) + s2 * np.eye(d))
        return M


def make_world(d: int = 2, n: int = 50, prior_variance: float = 1.0, noise_variance: float = 1.0,
               likelihood_variance: float = 1.0, grad_variances=(0.001,), phis=(1.0,), mus=None,
               seed: int = 0, w_star=None, w_prior=None, w_post=None) -> SyntheticWorld:
    """World with ``w_star ~ N(w_prior, prior_variance I)`` unless given explicitly.

    Prior and posterior means default to zero.
    """
    rng = np.random.default_rng(seed)
    w_prior = np.zeros(d) if w_prior is None else np.asarray(w_prior, dtype=np.float64)
    w_post = w_prior.copy() if w_post is None else np.asarray(w_post, dtype=np.float64)
    if w_star is None:
        w_star = w_prior + math.sqrt(prior_variance) * rng.standard_normal(d)
    mus = np.zeros((len(phis), d)) if mus is None else mus
    return SyntheticWorld(n, w_star, w_prior, w_post, prior_variance, np.asarray(phis, float),
                          mus, np.asarray(grad_variances, float), noise_variance,
                          likelihood_variance)


def generate_world_data(world: SyntheticWorld, n: Optional[int] = None, seed: int = 0):
    """Draw ``(gradients n x d, base outputs, labels)`` from the world."""
    n = world.n if n is None else n
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(world.phis), size=n, p=world.phis)
    z = rng.standard_normal((n, world.d))
    grads = world.mus[comp] + np.sqrt(world.grad_variances[comp])[:, None] * z
    base = rng.standard_normal(n)
    eps = math.sqrt(world.noise_variance) * rng.standard_normal(n)
    labels = base + grads @ (world.w_star - world.w_post) + eps
    return grads, base, labels


def world_statistics(world: SyntheticWorld, grads: np.ndarray, base: np.ndarray,
                     labels: np.ndarray):
    """``(||y - f(X; w_post)||^2, h)`` for a drawn sample."""
    return float(np.sum((labels - base) ** 2)), float(np.sum(grads**2))


def world_posterior_variance(world: SyntheticWorld, h: float, lam: float) -> float:
    """Isotropic Laplace variance ``(lam h / (d sigma^2) + 1/sigma_pi^2)^-1``."""
    return 1.0 / (lam * h / (world.d * world.likelihood_variance) + 1.0 / world.prior_variance)


def proposition_bound(world: SyntheticWorld, train_residual_sq: float, h: float, lam: float,
                      delta: float) -> BoundReport:
    """Upper bound on ``2 E_{w ~ posterior} L_D^nll(w)`` for the linearized world."""
    n, d = world.n, world.d
    _check_common(lam, delta, n)
    c = world.c
    if lam >= 1.0 / c:
        raise InadmissibleTemperatureError(lam, c)
    if h < 0:
        raise ValueError("curvature h must be non-negative")
    s2, sp = world.likelihood_variance, world.prior_variance
    sx = world.grad_variance
    u = lam * h / (d * s2)
    residual = train_residual_sq / (n * s2)
    log_const = math.log(2 * math.pi * s2)
    curvature = h / (2 * n * s2) / (u + 1.0 / sp)
    mixture = 2 * sx * (sp * d + float(np.sum(world.w_star**2))) / (1.0 - 2 * lam * n * sx * sp)
    dist = float(np.sum((world.w_post - world.w_prior) ** 2))
    complexity = ((d / sp) / (u + 1.0 / (2 * sp)) + dist / sp - d
                  + d * math.log(u + 1.0 / sp) + d * math.log(sp))
    value = (residual + log_const + world.noise_variance + curvature + mixture
             + (complexity + 2 * math.log(1.0 / delta)) / (lam * n))
    terms = {
        "residual": residual,
        "log_likelihood_constant": log_const,
        "label_noise": world.noise_variance,
        "curvature": curvature,
        "mixture": mixture,
        "complexity": (complexity + 2 * math.log(1.0 / delta)) / (lam * n),
        "c": c,
    }
    return BoundReport("proposition", lam, delta, residual, complexity, curvature + mixture,
                       value, n, terms)


def analytic_risk(world: SyntheticWorld, w: np.ndarray) -> np.ndarray:
    """Expected Gaussian NLL of the linearized model at each row of ``w``."""
    w = np.atleast_2d(w)
    diff = world.w_star - w
    quad = np.einsum("si,ij,sj->s", diff, world.gradient_second_moment(), diff)
    s2 = world.likelihood_variance
    return 0.5 * math.log(2 * math.pi * s2) + (quad + world.noise_variance) / (2 * s2)


def mc_true_risk(world: SyntheticWorld, posterior_variance: float, num_weight_samples: int,
                 seed: int = 0) -> float:
    """Monte-Carlo ``2 E_{w ~ N(w_post, v I)} L_D^nll(w)``."""
    if num_weight_samples < 1:
        raise ValueError("num_weight_samples must be at least 1")
    rng = np.random.default_rng(seed)
    w = world.w_post + math.sqrt(posterior_variance) * rng.standard_normal(
        (num_weight_samples, world.d))
    return float(2 * analytic_risk(world, w).mean())
