import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tempered_laplace import laplace as lp
from tempered_laplace import metrics as mt
from tempered_laplace import nn
from tempered_laplace.data import make_blobs, make_spirals
from tempered_laplace.training import TrainConfig, train_map


def _labels(y, K):
    return nn.Dataset(np.zeros((len(y), 1)), np.asarray(y, dtype=np.int64), num_classes=K)


def _pred(probs):
    return mt.PredictiveResult(np.asarray(probs, dtype=float), 1, 0)


@pytest.fixture(scope="module")
def trained():
    data = make_blobs(600, seed=0)
    arch = nn.MlpArchitecture((2, 8, 2), "relu")
    train = data.subset(np.arange(400))
    est = train_map(arch, train, TrainConfig(learning_rate=0.05, epochs=10))
    return est, data.subset(np.arange(400, 600)), train


def test_one_hot_correct_predictions():
    y = np.array([0, 2, 1, 2])
    m = mt.evaluate(_pred(np.eye(3)[y]), _labels(y, 3))
    assert (m.zero_one, m.nll, m.ece) == (0.0, 0.0, 0.0)


def test_uniform_predictions_binary():
    y = np.array([0, 1] * 10)
    m = mt.evaluate(_pred(np.full((20, 2), 0.5)), _labels(y, 2), 15)
    assert m.zero_one == 0.5
    assert m.nll == pytest.approx(math.log(2), abs=1e-15)
    assert m.ece == pytest.approx(0.0, abs=1e-15)


def test_four_point_ece_example():
    probs = np.array([[0.9, 0.1], [0.9, 0.1], [0.6, 0.4], [0.6, 0.4]])
    y = np.array([0, 1, 0, 0])
    m = mt.evaluate(_pred(probs), _labels(y, 2), 2)
    assert m.ece == pytest.approx(0.40, abs=1e-12)
    assert [c for _, _, c in m.per_bin] == [2, 2]


def test_ties_resolve_to_lowest_class():
    m = mt.evaluate(_pred([[0.5, 0.5]]), _labels([0], 2))
    assert m.zero_one == 0.0


def test_nll_clamps_zero_probability():
    m = mt.evaluate(_pred([[1.0, 0.0]]), _labels([1], 2))
    assert m.nll == pytest.approx(-math.log(mt.PROB_FLOOR))


def test_bad_inputs_rejected():
    with pytest.raises(ValueError):
        mt.evaluate(_pred([[1.0, 0.0]]), _labels([1], 2), 0)
    with pytest.raises(ValueError):
        mt.PredictiveResult(np.ones((1, 1)), 0, 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 20), st.integers(2, 5))
def test_ece_properties(seed, num_bins, K):
    rng = np.random.default_rng(seed)
    n = 50
    probs = rng.dirichlet(np.full(K, 0.5), size=n)
    y = rng.integers(0, K, n)
    m = mt.evaluate(_pred(probs), _labels(y, K), num_bins)
    assert 0.0 <= m.ece <= 1.0
    assert sum(c for _, _, c in m.per_bin) == n
    assert abs(mt.ece_from_bins(m.per_bin) - m.ece) < 1e-12
    perm = rng.permutation(n)
    m2 = mt.evaluate(_pred(probs[perm]), _labels(y[perm], K), num_bins)
    assert m2.ece == pytest.approx(m.ece, abs=1e-12)
    assert m2.zero_one == m.zero_one


def test_predictive_is_average_of_sampled_softmaxes(trained):
    est, test, _ = trained
    curv = lp.ggn_trace(est, test)
    post = lp.fit_tempered_posterior(est, curv, 1.0, 0.1)
    pred = mt.posterior_predictive(post, test, 7, seed=3)
    manual = np.mean([nn.softmax(nn.forward_batch(w, test.inputs))
                      for w in lp.sample_weights(post, 3, 7)], axis=0)
    np.testing.assert_allclose(pred.probs, manual, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(pred.probs.sum(axis=1), 1.0, atol=1e-9)


def test_collapsed_predictive_equals_map(trained):
    est, test, train = trained
    post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, train), 1e12, 0.1)
    pred = mt.posterior_predictive(post, test, 1, seed=0)
    np.testing.assert_allclose(pred.probs, mt.deterministic_predictive(est.params, test).probs, atol=1e-6)
    for lam in (1e10, 1e12):
        post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, test), lam, 0.1)
        z = mt.evaluate(mt.posterior_predictive(post, test, 10, 0), test).zero_one
        assert z == mt.evaluate(mt.deterministic_predictive(est.params, test), test).zero_one


def test_degenerate_posterior_is_seed_independent(trained):
    est, test, _ = trained
    post = lp.TemperedPosterior(est.params, "isotropic", 1.0, 0.1, 0.0)
    a = mt.posterior_predictive(post, test, 3, seed=1).probs
    b = mt.posterior_predictive(post, test, 3, seed=99).probs
    assert a.tobytes() == b.tobytes()


def test_monte_carlo_convergence(trained):
    est, test, _ = trained
    post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, test), 1e-2, 0.1)
    a = mt.posterior_predictive(post, test, 1000, seed=1).probs
    b = mt.posterior_predictive(post, test, 1000, seed=2).probs
    assert np.max(np.abs(a - b)) < 0.05


def test_relative_entropy_zero_when_predictive_is_exact():
    data = make_blobs(300, seed=4)
    pred = _pred(data.conditional())
    assert abs(mt.predictive_relative_entropy(pred, data)) < 1e-9


def test_relative_entropy_matches_per_class_enumeration(trained):
    est, _, _ = trained
    data = make_blobs(500, seed=9)
    post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, data), 1.0, 0.1)
    pred = mt.posterior_predictive(post, data, 20, 0)
    pd = data.conditional()
    total = 0.0
    for i in range(data.n):
        for k in range(2):
            if pd[i, k] > 0:
                total += pd[i, k] * (math.log(pd[i, k]) - math.log(max(pred.probs[i, k], 1e-12)))
    assert mt.predictive_relative_entropy(pred, data) == pytest.approx(total / data.n, rel=1e-10)
    assert total >= 0


def test_relative_entropy_needs_true_conditional():
    data = make_spirals(50, seed=0)
    with pytest.raises(ValueError, match="true conditional"):
        mt.predictive_relative_entropy(_pred(np.full((50, 2), 0.5)), data)


@pytest.mark.parametrize("lam", [1e-3, 1.0, 1e3])
def test_jensen_chain_holds(trained, lam):
    est, _, _ = trained
    data = make_blobs(2000, seed=11)
    post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, data), lam, 0.1)
    lhs, rhs = mt.jensen_chain(post, data, 30, seed=0)
    assert lhs >= 0
    assert lhs <= rhs + 0.02


def test_gibbs_zero_one_is_average_of_sampled_errors(trained):
    est, test, _ = trained
    post = lp.fit_tempered_posterior(est, lp.ggn_trace(est, test), 0.1, 0.1)
    manual = np.mean([np.mean(np.argmax(nn.forward_batch(w, test.inputs), 1) != test.targets)
                      for w in lp.sample_weights(post, 5, 9)])
    assert mt.gibbs_zero_one(post, test, 9, 5) == pytest.approx(manual, abs=1e-15)
