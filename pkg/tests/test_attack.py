import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from cdn import autodiff as ad
from cdn.attack import DEFAULT_GRID, clean_evaluation, fgsm, input_gradient, robustness_sweep
from cdn.baselines import MLP
from cdn.model import Architecture, CompoundDensityNetwork


class LinearSoftmax:
    """``p = softmax(x W)``: the input gradient of the NLL is ``(p - onehot) W^T``."""

    task = "classification"

    def __init__(self, W):
        self.W = np.asarray(W, dtype=float)

    def attack_loss(self, x, y, rng):
        logits = ad.matmul(x, self.W)
        return ad.neg(ad.reduce_sum(ad.mul(ad.log_softmax(logits), np.eye(self.W.shape[1])[y])))

    def predict(self, x, rng, samples=1):
        z = x @ self.W
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def test_linear_softmax_gradient_oracle(rng):
    W = rng.normal(size=(4, 3))
    model = LinearSoftmax(W)
    x, y = rng.uniform(size=(5, 4)), rng.integers(0, 3, size=5)
    p = model.predict(x, None)
    want = (p - np.eye(3)[y]) @ W.T
    np.testing.assert_allclose(input_gradient(model, x, y, rng), want, atol=1e-12)
    adv = fgsm(model, x, y, 0.1, rng, clip=None)
    np.testing.assert_allclose(adv, x + 0.1 * np.sign(want))


def test_sign_of_zero_is_zero():
    model = LinearSoftmax(np.zeros((2, 2)))
    x = np.full((1, 2), 0.5)
    np.testing.assert_array_equal(fgsm(model, x, np.array([0]), 0.3, None), x)


def test_eps_zero_is_identity(rng):
    x = rng.uniform(size=(3, 4))
    assert fgsm(LinearSoftmax(rng.normal(size=(4, 2))), x, np.zeros(3, int), 0.0, rng).tobytes() == x.tobytes()


def test_negative_eps(rng):
    with pytest.raises(ValueError):
        fgsm(LinearSoftmax(np.eye(2)), np.zeros((1, 2)), np.array([0]), -0.1, rng)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), eps=st.floats(0.0, 1.0))
def test_budget_and_range(seed, eps):
    rng = np.random.default_rng(seed)
    model = LinearSoftmax(rng.normal(size=(6, 3)))
    x = rng.uniform(size=(4, 6))
    adv = fgsm(model, x, rng.integers(0, 3, size=4), eps, rng)
    assert np.max(np.abs(adv - x)) <= eps
    assert adv.min() >= 0.0 and adv.max() <= 1.0


@pytest.mark.parametrize("eps", DEFAULT_GRID)
def test_budget_exact_on_pixel_grid(eps):
    # k/255 pixels plus grid eps are where x + eps rounds past the budget
    rng = np.random.default_rng(5)
    model = LinearSoftmax(rng.normal(size=(256, 3)))
    x = np.tile(np.arange(256) / 255.0, (6, 1))
    adv = fgsm(model, x, rng.integers(0, 3, size=6), eps, rng)
    assert np.max(np.abs(adv - x)) <= eps
    assert adv.min() >= 0.0 and adv.max() <= 1.0


def test_multi_pass_averages_gradients(rng):
    arch = Architecture([4, 6, 3], hyper_hidden=[5])
    m = CompoundDensityNetwork(arch, np.random.default_rng(0), bayesian=True, posterior_init=0.3)
    x, y = rng.uniform(size=(2, 4)), np.array([0, 2])
    stream = np.random.default_rng(7)
    g = sum(input_gradient(m, x, y, stream) for _ in range(3)) / 3
    want = np.clip(x + 0.2 * np.sign(g), 0, 1)
    np.testing.assert_allclose(fgsm(m, x, y, 0.2, np.random.default_rng(7), passes=3), want, rtol=0, atol=2**-52)  # budget nudge moves at most an ulp
    # single passes of a stochastic model disagree
    assert not np.array_equal(input_gradient(m, x, y, np.random.default_rng(1)), input_gradient(m, x, y, np.random.default_rng(2)))


def test_sweep_eps_zero_matches_clean(rng):
    m = MLP(Architecture([4, 8, 3]), np.random.default_rng(0), dropout=0.5)
    x, y = rng.uniform(size=(30, 4)), rng.integers(0, 3, size=30)
    curve = robustness_sweep(m, x, y, [0.0, 0.5], seed=3, samples=10)
    clean = clean_evaluation(m, x, y, seed=3, samples=10)
    assert (curve[0].accuracy, curve[0].mean_entropy) == (clean.accuracy, clean.mean_entropy)
    for p in curve:
        assert 0 <= p.accuracy <= 1 and 0 <= p.mean_entropy <= math.log(3) + 1e-12


def test_sweep_rejects_unsorted(rng):
    with pytest.raises(ValueError):
        robustness_sweep(LinearSoftmax(np.eye(2)), np.zeros((1, 2)), [0], [0.5, 0.1])


def test_linear_model_entropy_rises(rng):
    # moving against the true class pushes a confident linear model toward uncertainty first
    W = np.array([[4.0, -4.0], [-4.0, 4.0]])
    x = np.tile([[0.9, 0.1]], (10, 1))
    curve = robustness_sweep(LinearSoftmax(W), x, np.zeros(10, int), DEFAULT_GRID[:5], samples=1)
    ents = [p.mean_entropy for p in curve]
    assert spearmanr(DEFAULT_GRID[:5], ents).statistic > 0
    assert curve[0].accuracy == 1.0
