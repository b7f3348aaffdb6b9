"""Temperature-scaled Laplace approximations built on GGN curvature.

Two curvature summaries are supported: the exact GGN trace ``h`` (used for the
isotropic posterior) and per-layer Kronecker factors (KFAC).  KFAC factors are
expressed on the *augmented* weight matrix ``[W | b]`` of a layer, flattened
row-major; in that ordering the GGN block is approximated by ``kron(G, A)``
with ``A`` the ``(in+1) x (in+1)`` input second moment and ``G`` the
``out x out`` output-gradient second moment.  :func:`kfac_block` maps such a
product back to the flat parameter layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .nn import Dataset, ModelParams, batch_losses, default_loss, output_deltas, softmax
from .training import MapEstimate

FACTOR_JITTER = 1e-8
_CHUNK = 4096


def _params_of(model) -> ModelParams:
    return model.params if isinstance(model, MapEstimate) else model


def _likelihood_variance(model, likelihood_variance):
    if likelihood_variance is not None:
        return likelihood_variance
    if isinstance(model, MapEstimate):
        return model.config.likelihood_variance
    return 1.0


def noise_diagonal(params: ModelParams, out: np.ndarray, likelihood_variance: float = 1.0) -> np.ndarray:
    """Diagonal of the output-space curvature ``-d^2 log p / df^2`` per sample."""
    if params.arch.output_head == "gaussian":
        return np.full(out.shape, 1.0 / likelihood_variance)
    p = softmax(out)
    return p * (1.0 - p)


def noise_matrices(params: ModelParams, out: np.ndarray, likelihood_variance: float = 1.0) -> np.ndarray:
    """Full output-space curvature per sample, shape ``n x K x K``."""
    n, K = out.shape
    if params.arch.output_head == "gaussian":
        return np.broadcast_to(np.eye(K) / likelihood_variance, (n, K, K)).copy()
    p = softmax(out)
    return p[:, :, None] * np.eye(K) - p[:, :, None] * p[:, None, :]


@dataclass(frozen=True)
class CurvatureSummary:
    h: float
    d: int
    n: int
    kfac_factors: Optional[list] = None
    singular_layers: tuple = ()


def ggn_trace(model, data: Dataset, likelihood_variance: Optional[float] = None) -> CurvatureSummary:
    """Exact trace of the GGN, ``sum_i sum_k Lambda_kk ||grad_w f_k(x_i)||^2``."""
    params = _params_of(model)
    s2 = _likelihood_variance(model, likelihood_variance)
    h = 0.0
    for start in range(0, data.n, _CHUNK):
        X = data.inputs[start:start + _CHUNK]
        inputs, deltas, out = output_deltas(params, X)
        sq = np.zeros(out.shape)
        for a, dl in zip(inputs, deltas):
            sq += np.einsum("nko,nko->nk", dl, dl) * (1.0 + np.einsum("ni,ni->n", a, a))[:, None]
        h += float(np.sum(noise_diagonal(params, out, s2) * sq))
    return CurvatureSummary(h=h, d=params.d, n=data.n)


def kfac_factors(model, data: Dataset, likelihood_variance: Optional[float] = None) -> CurvatureSummary:
    """Per-layer factors ``A = mean(a a^T)`` and ``G = sum(D^T Lambda D)``.

    With this scaling ``kron(G, A)`` reproduces the GGN block exactly for a
    single sample, and whenever all samples share the same layer input.
    """
    params = _params_of(model)
    s2 = _likelihood_variance(model, likelihood_variance)
    L = params.arch.num_layers
    As = [0.0] * L
    Gs = [0.0] * L
    h = 0.0
    for start in range(0, data.n, _CHUNK):
        X = data.inputs[start:start + _CHUNK]
        inputs, deltas, out = output_deltas(params, X)
        lam = noise_matrices(params, out, s2)
        diag = np.einsum("nkk->nk", lam)
        for l, (a, dl) in enumerate(zip(inputs, deltas)):
            abar = np.hstack([a, np.ones((a.shape[0], 1))])
            As[l] = As[l] + abar.T @ abar
            Gs[l] = Gs[l] + np.einsum("nko,nkj,njp->op", dl, lam, dl)
            h += float(np.sum(diag * np.einsum("nko,nko->nk", dl, dl)
                              * np.einsum("ni,ni->n", abar, abar)[:, None]))
    factors, singular = [], []
    for l in range(L):
        A = As[l] / data.n
        G = Gs[l]
        A = 0.5 * (A + A.T)
        G = 0.5 * (G + G.T)
        if _is_singular(A) or _is_singular(G):
            singular.append(l)
        factors.append((A, G))
    return CurvatureSummary(h=h, d=params.d, n=data.n, kfac_factors=factors,
                            singular_layers=tuple(singular))


def _is_singular(M: np.ndarray) -> bool:
    ev = np.linalg.eigvalsh(M)
    return bool(ev[0] <= 1e-12 * max(ev[-1], 1e-300))


def kfac_block(A: np.ndarray, G: np.ndarray) -> np.ndarray:
    """``kron(G, A)`` reordered to the flat layout (weights row-major, then biases)."""
    out = G.shape[0]
    inp = A.shape[0] - 1
    aug = np.kron(G, A)
    idx = np.arange(out * (inp + 1)).reshape(out, inp + 1)
    perm = np.concatenate([idx[:, :inp].ravel(), idx[:, inp]])
    return aug[np.ix_(perm, perm)]


def _eig_psd(M: np.ndarray, jitter: bool):
    if jitter:
        M = M + FACTOR_JITTER * np.eye(M.shape[0])
    ev, U = np.linalg.eigh(M)
    return np.clip(ev, 0.0, None), U


@dataclass(frozen=True)
class TemperedPosterior:
    """Gaussian over weights centred on the MAP.

    For ``kind == "isotropic"`` the covariance is ``variance * I``.  For
    ``kind == "kfac"`` each layer carries eigendecompositions
    ``(a_eigvals, a_eigvecs, g_eigvals, g_eigvecs)`` of its factors and the
    variance along eigendirection ``(o, j)`` is
    ``1 / (lambda * g_o * a_j + 1 / prior_variance)``.
    """

    mean: ModelParams
    kind: str
    lam: float
    prior_variance: float
    variance: Optional[float] = None
    eigen: Optional[list] = field(default=None, repr=False)

    @property
    def d(self) -> int:
        return self.mean.d

    def layer_variances(self) -> list:
        """Per-layer ``out x (in+1)`` variances in the factor eigenbasis."""
        if self.kind != "kfac":
            raise ValueError("layer variances exist only for KFAC posteriors")
        return [1.0 / (self.lam * np.outer(g, a) + 1.0 / self.prior_variance)
                for a, _, g, _ in self.eigen]

    def all_variances(self) -> np.ndarray:
        if self.kind == "isotropic":
            return np.full(self.d, self.variance)
        return np.concatenate([v.ravel() for v in self.layer_variances()])


def isotropic_variance(h: float, d: int, lam: float, prior_variance: float) -> float:
    return 1.0 / (lam * h / d + 1.0 / prior_variance)


def fit_tempered_posterior(model, curvature: CurvatureSummary, lam: float,
                           prior_variance: float, kind: str = "isotropic") -> TemperedPosterior:
    """Laplace posterior with covariance ``(lam * H + I / prior_variance)^-1``."""
    if not lam > 0:
        raise ValueError(f"temperature must be positive, got {lam}")
    if not prior_variance > 0:
        raise ValueError(f"prior variance must be positive, got {prior_variance}")
    params = _params_of(model)
    if kind == "isotropic":
        var = isotropic_variance(curvature.h, curvature.d, lam, prior_variance)
        return TemperedPosterior(params, "isotropic", float(lam), float(prior_variance), var)
    if kind != "kfac":
        raise ValueError(f"unknown posterior kind {kind!r}")
    if curvature.kfac_factors is None:
        raise ValueError("KFAC posterior needs a curvature summary with factors")
    eigen = []
    for l, (A, G) in enumerate(curvature.kfac_factors):
        jitter = l in curvature.singular_layers
        a, Ua = _eig_psd(A, jitter)
        g, Ug = _eig_psd(G, jitter)
        eigen.append((a, Ua, g, Ug))
    return TemperedPosterior(params, "kfac", float(lam), float(prior_variance), eigen=eigen)


def sample_weight_matrix(post: TemperedPosterior, seed: int, count: int) -> np.ndarray:
    """``count x d`` matrix of i.i.d. posterior draws."""
    if count < 1:
        raise ValueError("count must be at least 1")
    rng = np.random.default_rng(seed)
    mean = post.mean.weights
    if post.kind == "isotropic":
        z = rng.standard_normal((count, post.d))
        return mean + np.sqrt(post.variance) * z
    out = np.empty((count, post.d))
    for (o, i), (ws, bs), (a, Ua, g, Ug), var in zip(
            post.mean.arch.layer_shapes, post.mean.arch.layer_slices(),
            post.eigen, post.layer_variances()):
        z = rng.standard_normal((count, o, i + 1)) * np.sqrt(var)
        x = Ug @ z @ Ua.T
        out[:, ws] = mean[ws] + x[:, :, :i].reshape(count, -1)
        out[:, bs] = mean[bs] + x[:, :, i]
    return out


def sample_weights(post: TemperedPosterior, seed: int, count: int) -> list:
    arch = post.mean.arch
    return [ModelParams(w, arch) for w in sample_weight_matrix(post, seed, count)]


def _relative_log_term(r: np.ndarray) -> np.ndarray:
    # r - 1 - ln r, accurate near r = 1
    t = np.log(r)
    return np.expm1(t) - t


def gaussian_kl_terms(post: TemperedPosterior, prior_mean, prior_variance: float) -> dict:
    """KL(posterior || N(prior_mean, prior_variance I)) split into its parts.

    ``variance`` collects ``sum(v/s - 1 - ln(v/s))`` over all directions and
    ``mean`` is ``||m - m0||^2 / s``; the KL is half their sum.
    """
    m0 = prior_mean.weights if isinstance(prior_mean, ModelParams) else np.asarray(prior_mean)
    dist = float(np.sum((post.mean.weights - m0) ** 2))
    r = post.all_variances() / prior_variance
    var_term = float(np.sum(_relative_log_term(r)))
    mean_term = dist / prior_variance
    return {"variance": var_term, "mean": mean_term, "kl": 0.5 * (var_term + mean_term)}


def gaussian_kl(post: TemperedPosterior, prior_mean, prior_variance: float) -> float:
    return max(gaussian_kl_terms(post, prior_mean, prior_variance)["kl"], 0.0)


def log_evidence(model, data: Dataset, prior_variance: float,
                 curvature: Optional[CurvatureSummary] = None, prior_mean=None,
                 likelihood_variance: Optional[float] = None) -> float:
    """Laplace log marginal likelihood with an isotropic ``h/d`` curvature surrogate."""
    params = _params_of(model)
    s2 = _likelihood_variance(model, likelihood_variance)
    if curvature is None:
        curvature = ggn_trace(params, data, s2)
    kind = default_loss(params.arch, s2)
    total_nll = float(batch_losses(params, data.inputs, data.targets, kind).sum())
    m0 = 0.0 if prior_mean is None else np.asarray(prior_mean)
    dist = float(np.sum((params.weights - m0) ** 2))
    d = curvature.d
    return (-total_nll - dist / (2 * prior_variance)
            - 0.5 * d * np.log1p(prior_variance * curvature.h / d))


def select_prior_variance(model, data: Dataset, candidate_grid, prior_mean=None,
                          curvature: Optional[CurvatureSummary] = None,
                          likelihood_variance: Optional[float] = None) -> float:
    """Grid value maximizing the Laplace evidence; ties go to the smaller value."""
    grid = sorted(float(v) for v in candidate_grid)
    if not grid:
        raise ValueError("candidate grid is empty")
    if any(v <= 0 for v in grid):
        raise ValueError("prior variances must be positive")
    if curvature is None:
        curvature = ggn_trace(model, data, likelihood_variance)
    best, best_val = grid[0], -np.inf
    for v in grid:
        val = log_evidence(model, data, v, curvature, prior_mean, likelihood_variance)
        if val > best_val:
            best, best_val = v, val
    return best
