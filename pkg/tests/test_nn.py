import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_difference, random_params
from tempered_laplace import nn


def test_parameter_count_and_layout():
    arch = nn.MlpArchitecture((3, 5, 2))
    assert arch.num_params == (3 + 1) * 5 + (5 + 1) * 2
    params = nn.ModelParams(np.arange(arch.num_params, dtype=float), arch)
    (W1, b1), (W2, b2) = params.layers()
    assert W1.shape == (5, 3) and b1.shape == (5,)
    # weights row-major first, then biases, layers in order
    assert W1[0, 1] == 1.0 and b1[0] == 15.0 and W2[0, 0] == 20.0 and b2[-1] == 31.0


def test_architecture_validation():
    with pytest.raises(ValueError):
        nn.MlpArchitecture((3,))
    with pytest.raises(ValueError):
        nn.MlpArchitecture((3, 0, 2))
    with pytest.raises(ValueError):
        nn.ModelParams(np.zeros(4), nn.MlpArchitecture((2, 2)))
    arch = nn.MlpArchitecture((2, 2))
    with pytest.raises(ValueError):
        nn.ModelParams(np.array([0, 0, 0, 0, np.nan, 0]), arch)


def test_identity_layer_passes_input_through():
    arch = nn.MlpArchitecture((2, 2), "identity", "gaussian")
    params = nn.ModelParams(np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]), arch)
    np.testing.assert_array_equal(nn.forward(params, [1.0, 2.0]), [1.0, 2.0])


def test_zero_weights_give_uniform_probabilities():
    arch = nn.MlpArchitecture((3, 4, 5), "relu")
    params = nn.ModelParams(np.zeros(arch.num_params), arch)
    p = nn.softmax(nn.forward(params, [0.3, -2.0, 7.0]))
    np.testing.assert_allclose(p, np.full(5, 0.2), atol=1e-15)


def test_forward_matches_hand_rolled_network():
    arch = nn.MlpArchitecture((2, 4, 2), "tanh")
    params = nn.ModelParams(np.random.default_rng(0).standard_normal(arch.num_params), arch)
    # frozen from a scalar-loop re-implementation of the same network
    expected = [2.070405046430822, 1.7897025042976176]
    np.testing.assert_allclose(nn.forward(params, [0.5, -0.5]), expected, rtol=1e-14)


def test_forward_rejects_wrong_input_dimension():
    params = random_params((3, 4, 2))
    with pytest.raises(nn.ShapeError):
        nn.forward(params, [1.0, 2.0])


def test_forward_is_pure():
    params = random_params((3, 6, 2), "relu")
    x = np.array([0.1, -0.4, 2.0])
    a = nn.forward(params, x)
    b = nn.forward(params, x.copy())
    assert a.tobytes() == b.tobytes()


def test_loss_values():
    arch = nn.MlpArchitecture((1, 10))
    zero = nn.ModelParams(np.zeros(arch.num_params), arch)
    assert nn.loss(zero, [0.3], 4, nn.LossKind.nll_categorical()) == pytest.approx(math.log(10), abs=1e-12)

    confident = nn.ModelParams(np.r_[np.zeros(10), 1e4 * np.eye(10)[3]], arch)
    assert nn.loss(confident, [0.0], 3, nn.LossKind.nll_categorical()) == 0.0
    assert nn.loss(confident, [0.0], 3, nn.LossKind.zero_one()) == 0.0
    assert nn.loss(confident, [0.0], 2, nn.LossKind.zero_one()) == 1.0

    garch = nn.MlpArchitecture((1, 1), "identity", "gaussian")
    g = nn.ModelParams(np.array([2.0, 1.0]), garch)
    assert nn.loss(g, [1.5], 4.0, nn.LossKind.nll_gaussian(1.0)) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)


def test_gaussian_loss_on_categorical_head_is_rejected():
    params = random_params((2, 3, 2))
    with pytest.raises(nn.IncompatibleLossError):
        nn.loss(params, [0.0, 1.0], 0.5, nn.LossKind.nll_gaussian(1.0))
    with pytest.raises(ValueError):
        nn.LossKind.nll_gaussian(0.0)


def test_zero_one_has_no_gradient():
    params = random_params((2, 3, 2))
    with pytest.raises(nn.NonDifferentiableLossError):
        nn.grad_loss(params, [0.0, 1.0], 1, nn.LossKind.zero_one())


def test_gradient_vanishes_at_interior_minimum():
    # linear Gaussian model sitting exactly on its target
    arch = nn.MlpArchitecture((2, 1), "identity", "gaussian")
    params = nn.ModelParams(np.array([0.7, -0.2, 0.1]), arch)
    x = np.array([1.0, 3.0])
    y = float(nn.forward(params, x)[0])
    assert np.linalg.norm(nn.grad_loss(params, x, y, nn.LossKind.nll_gaussian())) < 1e-10


def test_linear_gaussian_gradient_is_residual_times_input():
    arch = nn.MlpArchitecture((3, 1), "identity", "gaussian")
    params = nn.ModelParams(np.array([0.5, -1.0, 2.0, 0.25]), arch)
    x = np.array([1.0, 2.0, -0.5])
    y = 0.3
    f = float(nn.forward(params, x)[0])
    g = nn.grad_loss(params, x, y, nn.LossKind.nll_gaussian(1.0))
    np.testing.assert_array_equal(g, (f - y) * np.r_[x, 1.0])


def test_gradient_matches_finite_differences_small_net():
    params = random_params((2, 3, 2), "tanh", seed=3)
    x, y = np.array([0.4, -1.1]), 1
    kind = nn.LossKind.nll_categorical()
    g = nn.grad_loss(params, x, y, kind)
    fd = central_difference(lambda w: nn.loss(params.with_weights(w), x, y, kind), params.weights)
    np.testing.assert_allclose(g, fd, rtol=1e-6, atol=1e-9)


def test_linear_jacobian_rows_are_inputs():
    arch = nn.MlpArchitecture((3, 2), "identity", "gaussian")
    params = random_params((3, 2), "identity", "gaussian", seed=5)
    x = np.array([0.2, -0.7, 1.5])
    J = nn.per_sample_jacobian(params, x)
    np.testing.assert_array_equal(J[0, :3], x)
    np.testing.assert_array_equal(J[1, 3:6], x)
    np.testing.assert_array_equal(J[:, 6:], np.eye(2))
    assert arch.num_params == J.shape[1]


def test_dead_input_gives_zero_first_layer_weight_jacobian():
    arch = nn.MlpArchitecture((3, 4, 2), "relu")
    rng = np.random.default_rng(2)
    w = rng.standard_normal(arch.num_params)
    ws, bs = arch.layer_slices()[0]
    w[bs] = 0.0
    J = nn.per_sample_jacobian(nn.ModelParams(w, arch), np.zeros(3))
    np.testing.assert_array_equal(J[:, ws], 0.0)


def test_jacobian_matches_finite_differences():
    params = random_params((3, 5, 4, 3), "tanh", seed=8)
    x = np.array([0.3, -0.2, 0.9])
    J = nn.per_sample_jacobian(params, x)
    fd = central_difference(lambda w: nn.forward(params.with_weights(w), x), params.weights)
    np.testing.assert_allclose(J, fd, rtol=1e-6, atol=1e-9)


def test_batch_gradient_is_mean_of_single_gradients():
    params = random_params((2, 4, 3), "relu", seed=11)
    rng = np.random.default_rng(0)
    X = rng.standard_normal((6, 2))
    y = rng.integers(0, 3, 6)
    kind = nn.LossKind.nll_categorical()
    single = np.mean([nn.grad_loss(params, X[i], y[i], kind) for i in range(6)], axis=0)
    np.testing.assert_allclose(nn.grad_batch_loss(params, X, y, kind), single, rtol=1e-12, atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(-100, 100))
def test_softmax_normalises_and_is_shift_invariant(logits, shift):
    z = np.array(logits)
    p = nn.softmax(z)
    assert abs(p.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(nn.log_softmax(z + shift), nn.log_softmax(z), atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["relu", "tanh", "identity"]),
       st.sampled_from(["softmax_categorical", "gaussian"]))
def test_gradient_property(seed, activation, head):
    rng = np.random.default_rng(seed)
    sizes = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
    params = random_params(sizes, activation, head, seed=seed)
    x = rng.standard_normal(sizes[0])
    if head == "gaussian":
        y, kind = rng.standard_normal(sizes[-1]), nn.LossKind.nll_gaussian(0.7)
    else:
        y, kind = int(rng.integers(0, sizes[-1])), nn.LossKind.nll_categorical()
    g = nn.grad_loss(params, x, y, kind)
    fd = central_difference(lambda w: nn.loss(params.with_weights(w), x, y, kind), params.weights)
    err = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-4)
    assert err.max() < 1e-5
