"""Multilayer perceptrons with exact backpropagation and per-sample Jacobians.

Weights live in one flat float64 vector. Layers are stored in forward order;
each layer contributes its weight matrix (``out x in``, row-major) followed by
its bias vector (``out``). Hidden layers apply the activation, the output layer
is affine (logits for the softmax head, the mean for the Gaussian head).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

ACTIVATIONS = ("relu", "tanh", "identity")
HEADS = ("softmax_categorical", "gaussian")


class ShapeError(ValueError):
    """Input does not match the network dimensions."""


class IncompatibleLossError(ValueError):
    """Loss kind cannot be used with the network's output head."""


class NonDifferentiableLossError(ValueError):
    """Gradient requested for the zero-one loss."""


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: tuple
    activation: str = "relu"
    output_head: str = "softmax_categorical"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if len(sizes) < 2 or any(s < 1 for s in sizes):
            raise ValueError(f"invalid layer sizes {self.layer_sizes!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.output_head not in HEADS:
            raise ValueError(f"unknown output head {self.output_head!r}")
        object.__setattr__(self, "layer_sizes", sizes)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def layer_shapes(self) -> list:
        """``(out, in)`` for every affine layer."""
        return [(o, i) for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    @property
    def num_params(self) -> int:
        return sum((i + 1) * o for o, i in self.layer_shapes)

    def layer_slices(self) -> list:
        """Per layer, ``(weight_slice, bias_slice)`` into the flat vector."""
        out = []
        start = 0
        for o, i in self.layer_shapes:
            w = slice(start, start + o * i)
            b = slice(w.stop, w.stop + o)
            out.append((w, b))
            start = b.stop
        return out

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "activation": self.activation,
            "output_head": self.output_head,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        return cls(tuple(d["layer_sizes"]), d["activation"], d["output_head"])


@dataclass(frozen=True)
class ModelParams:
    weights: np.ndarray
    arch: MlpArchitecture

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).ravel()
        if w.size != self.arch.num_params:
            raise ShapeError(
                f"weight vector has length {w.size}, architecture needs {self.arch.num_params}"
            )
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return self.weights.size

    def layers(self) -> list:
        """List of ``(W, b)`` views in forward order."""
        out = []
        for (o, i), (ws, bs) in zip(self.arch.layer_shapes, self.arch.layer_slices()):
            out.append((self.weights[ws].reshape(o, i), self.weights[bs]))
        return out

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(weights, self.arch)


@dataclass(frozen=True)
class Dataset:
    """Inputs, targets and (for synthetic data) the true conditional ``p_D(y|x)``.

    ``true_conditional`` is either an ``n x K`` array of per-row class
    probabilities or a callable mapping an input matrix to such an array.
    """

    inputs: np.ndarray
    targets: np.ndarray
    true_conditional: Optional[object] = None
    name: str = "dataset"
    num_classes: Optional[int] = None

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        y = np.asarray(self.targets)
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} targets")
        if np.issubdtype(y.dtype, np.integer):
            k = self.num_classes if self.num_classes is not None else int(y.max()) + 1
            if y.min() < 0 or y.max() >= k:
                raise ValueError(f"labels must lie in [0, {k})")
            object.__setattr__(self, "num_classes", int(k))
        else:
            y = y.astype(np.float64)
            if not np.all(np.isfinite(y)):
                raise ValueError("regression targets must be finite")
        tc = self.true_conditional
        if tc is not None and not callable(tc):
            tc = np.asarray(tc, dtype=np.float64)
            if tc.shape[0] != x.shape[0] or np.any(tc < 0):
                raise ValueError("true_conditional must hold one distribution per row")
            if np.max(np.abs(tc.sum(axis=1) - 1.0)) > 1e-9:
                raise ValueError("true_conditional rows must sum to 1")
            object.__setattr__(self, "true_conditional", tc)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)

    def conditional(self) -> np.ndarray:
        tc = self.true_conditional
        if tc is None:
            raise ValueError(f"dataset {self.name!r} has no true conditional")
        if callable(tc):
            return np.asarray(tc(self.inputs), dtype=np.float64)
        return tc

    def subset(self, idx, name: Optional[str] = None) -> "Dataset":
        idx = np.asarray(idx)
        tc = self.true_conditional
        if tc is not None and not callable(tc):
            tc = tc[idx]
        return Dataset(
            self.inputs[idx],
            self.targets[idx],
            tc,
            name or self.name,
            self.num_classes,
        )


@dataclass(frozen=True)
class LossKind:
    """``zero_one``, ``nll_categorical`` or ``nll_gaussian`` with variance ``sigma2``."""

    name: str
    sigma2: float = 1.0

    def __post_init__(self):
        if self.name not in ("zero_one", "nll_categorical", "nll_gaussian"):
            raise ValueError(f"unknown loss {self.name!r}")
        if self.name == "nll_gaussian" and not self.sigma2 > 0:
            raise ValueError("Gaussian likelihood variance must be positive")

    @classmethod
    def zero_one(cls) -> "LossKind":
        return cls("zero_one")

    @classmethod
    def nll_categorical(cls) -> "LossKind":
        return cls("nll_categorical")

    @classmethod
    def nll_gaussian(cls, sigma2: float = 1.0) -> "LossKind":
        return cls("nll_gaussian", float(sigma2))


def default_loss(arch: MlpArchitecture, sigma2: float = 1.0) -> LossKind:
    if arch.output_head == "gaussian":
        return LossKind.nll_gaussian(sigma2)
    return LossKind.nll_categorical()


# -- activations ---------------------------------------------------------------


def _act(name: str) -> Callable:
    if name == "relu":
        return lambda z: np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh
    return lambda z: z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    # relu'(0) := 0
    if name == "relu":
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    return np.ones_like(z)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


# -- forward / backward --------------------------------------------------------


def _check_inputs(params: ModelParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.arch.input_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, network expects {params.arch.input_dim}")
    return x


def _forward_cache(params: ModelParams, X: np.ndarray):
    """Layer inputs ``a_l`` and pre-activations ``z_l`` for a batch."""
    act = _act(params.arch.activation)
    inputs, pre = [], []
    a = X
    layers = params.layers()
    for l, (W, b) in enumerate(layers):
        inputs.append(a)
        z = a @ W.T + b
        pre.append(z)
        a = act(z) if l < len(layers) - 1 else z
    return inputs, pre, a


def forward_batch(params: ModelParams, X) -> np.ndarray:
    """Network outputs for every row of ``X`` (shape ``n x out``)."""
    X = _check_inputs(params, np.atleast_2d(X))
    return _forward_cache(params, X)[2]


def forward(params: ModelParams, x) -> np.ndarray:
    """Network output for a single input vector."""
    x = _check_inputs(params, x)
    if x.ndim != 1:
        raise ShapeError("forward expects a single input vector; use forward_batch")
    return forward_batch(params, x[None, :])[0]


def _check_kind(params: ModelParams, kind: LossKind):
    head = params.arch.output_head
    if kind.name == "nll_gaussian" and head != "gaussian":
        raise IncompatibleLossError("Gaussian NLL needs a gaussian output head")
    if kind.name in ("nll_categorical", "zero_one") and head != "softmax_categorical":
        raise IncompatibleLossError(f"{kind.name} needs a softmax_categorical output head")


def _targets_2d(y, out_dim: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y.reshape(-1, out_dim)


def losses_from_outputs(out: np.ndarray, y, kind: LossKind) -> np.ndarray:
    """Per-row loss values given network outputs."""
    if kind.name == "zero_one":
        return (np.argmax(out, axis=1) != np.asarray(y)).astype(np.float64)
    if kind.name == "nll_categorical":
        y = np.asarray(y, dtype=np.intp)
        return -log_softmax(out)[np.arange(out.shape[0]), y]
    r = _targets_2d(y, out.shape[1]) - out
    return (0.5 * np.log(2 * np.pi * kind.sigma2) + r**2 / (2 * kind.sigma2)).sum(axis=1)


def batch_losses(params: ModelParams, X, y, kind: LossKind) -> np.ndarray:
    _check_kind(params, kind)
    return losses_from_outputs(forward_batch(params, X), y, kind)


def loss(params: ModelParams, x, y, kind: LossKind) -> float:
    """Loss of a single example."""
    _check_kind(params, kind)
    x = _check_inputs(params, x)
    return float(batch_losses(params, x[None, :], np.atleast_1d(y), kind)[0])


def mean_loss(params: ModelParams, data: Dataset, kind: LossKind) -> float:
    return float(batch_losses(params, data.inputs, data.targets, kind).mean())


def _output_grad(out: np.ndarray, y, kind: LossKind) -> np.ndarray:
    """d loss_i / d out_i for every row."""
    if kind.name == "nll_categorical":
        g = softmax(out)
        g[np.arange(out.shape[0]), np.asarray(y, dtype=np.intp)] -= 1.0
        return g
    return (out - _targets_2d(y, out.shape[1])) / kind.sigma2


def _backprop(params: ModelParams, inputs, pre, delta: np.ndarray) -> np.ndarray:
    """Sum over the batch of parameter gradients given output deltas (n x out)."""
    grad = np.empty(params.d)
    layers = params.layers()
    slices = params.arch.layer_slices()
    for l in range(len(layers) - 1, -1, -1):
        ws, bs = slices[l]
        grad[ws] = (delta.T @ inputs[l]).ravel()
        grad[bs] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ layers[l][0]) * _act_grad(params.arch.activation, pre[l - 1])
    return grad


def grad_batch_loss(params: ModelParams, X, y, kind: LossKind, reduction: str = "mean") -> np.ndarray:
    """Gradient of the mean (or summed) loss over a batch w.r.t. the flat weights."""
    if kind.name == "zero_one":
        raise NonDifferentiableLossError("the zero-one loss has no useful gradient")
    _check_kind(params, kind)
    X = _check_inputs(params, np.atleast_2d(X))
    inputs, pre, out = _forward_cache(params, X)
    delta = _output_grad(out, y, kind)
    if reduction == "mean":
        delta = delta / X.shape[0]
    return _backprop(params, inputs, pre, delta)


def grad_loss(params: ModelParams, x, y, kind: LossKind) -> np.ndarray:
    """Exact gradient of the single-example loss w.r.t. the flat weights."""
    x = _check_inputs(params, x)
    return grad_batch_loss(params, x[None, :], np.atleast_1d(y), kind, reduction="sum")


def output_deltas(params: ModelParams, X):
    """Backpropagated output-basis vectors for a batch.

    Returns ``(inputs, deltas, out)`` where ``deltas[l]`` has shape
    ``n x K x out_l`` and holds d f_k / d z_l for every sample and output
    ``k``; ``inputs[l]`` is the ``n x in_l`` layer input.  The derivative of
    output ``k`` w.r.t. layer ``l``'s weight matrix is the outer product
    ``deltas[l][i, k] * inputs[l][i]``; w.r.t. its bias, ``deltas[l][i, k]``.
    """
    X = _check_inputs(params, np.atleast_2d(X))
    inputs, pre, out = _forward_cache(params, X)
    n, K = out.shape
    layers = params.layers()
    deltas = [None] * len(layers)
    delta = np.broadcast_to(np.eye(K), (n, K, K)).copy()
    for l in range(len(layers) - 1, -1, -1):
        deltas[l] = delta
        if l > 0:
            delta = (delta @ layers[l][0]) * _act_grad(params.arch.activation, pre[l - 1])[:, None, :]
    return inputs, deltas, out


def batch_jacobians(params: ModelParams, X) -> np.ndarray:
    """Per-sample Jacobians, shape ``n x K x d``."""
    inputs, deltas, out = output_deltas(params, X)
    n, K = out.shape
    J = np.empty((n, K, params.d))
    for l, (ws, bs) in enumerate(params.arch.layer_slices()):
        J[:, :, ws] = (deltas[l][:, :, :, None] * inputs[l][:, None, None, :]).reshape(n, K, -1)
        J[:, :, bs] = deltas[l]
    return J


def per_sample_jacobian(params: ModelParams, x) -> np.ndarray:
    """Row ``c`` is the gradient of output ``c`` w.r.t. the flat weights."""
    x = _check_inputs(params, x)
    return batch_jacobians(params, x[None, :])[0]


def init_params(arch: MlpArchitecture, rng: np.random.Generator) -> ModelParams:
    """Zero biases, weights uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``."""
    w = np.zeros(arch.num_params)
    for (o, i), (ws, _) in zip(arch.layer_shapes, arch.layer_slices()):
        bound = 1.0 / np.sqrt(i)
        w[ws] = rng.uniform(-bound, bound, size=o * i)
    return ModelParams(w, arch)
