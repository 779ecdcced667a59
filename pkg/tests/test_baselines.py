import numpy as np
import pytest

from cdn import autodiff as ad
from cdn.baselines import MLP, DropoutMLP, Ensemble, VmgMLP, mcd_predict
from cdn.data import Dataset
from cdn.matrix_normal import kl_to_standard
from cdn.model import Architecture
from cdn.training import TrainConfig, train
from fd import numeric_grad, rel_err

CLS = Architecture([3, 6, 4])
REG = Architecture([1, 6, 2], task="regression")


def blobs(n=60, seed=0):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 4, size=n)
    return Dataset(rng.normal(size=(n, 3)) + 2 * np.eye(4)[y, :3], y)


class TestMLP:
    def test_deterministic_without_dropout(self, rng):
        m = MLP(CLS, rng)
        x = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(m.predict(x, rng, 10), m.predict(x, rng, 10))

    def test_dropout_rate_checked(self):
        with pytest.raises(ValueError):
            MLP(CLS, dropout=1.0)

    def test_dropout_zero_matches_mlp(self, rng):
        a, b = MLP(CLS, np.random.default_rng(1)), DropoutMLP(CLS, np.random.default_rng(1), dropout=0.0)
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(a.forward(x).data, b.forward(x, rng).data)

    def test_mc_dropout_varies_and_averages(self, rng):
        m = DropoutMLP(CLS, rng, dropout=0.5)
        x = rng.normal(size=(4, 3))
        outs = m.sample_outputs(x, rng, 5)
        assert not np.array_equal(outs[0], outs[1])
        probs = mcd_predict(m, x, rng, 50)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_inverted_dropout_keeps_expectation(self, rng):
        m = DropoutMLP(Architecture([2, 50, 1], task="regression", noise_std=1.0), rng, dropout=0.5)
        x = rng.normal(size=(1, 2))
        mean = np.mean([o[0, 0] for o in m.sample_outputs(x, rng, 4000)])
        m.dropout = 0.0
        exact = m.forward(x).data[0, 0]
        assert mean == pytest.approx(exact, abs=0.05 * max(1.0, abs(exact)))

    def test_gradient(self, rng):
        m = MLP(CLS, rng)
        x, y = rng.normal(size=(5, 3)), rng.integers(0, 4, size=5)
        W = m.params["layer1.weight"]
        m.objective(x, y, None, TrainConfig(objective="nll"), 5).loss.backward()

        def f(w):
            old, W.data = W.data, w
            v = m.objective(x, y, None, TrainConfig(objective="nll"), 5).loss.item()
            W.data = old
            return v

        (want,) = numeric_grad(f, [W.data.copy()])
        assert rel_err(W.grad, want) < 1e-6

    def test_trains(self):
        ds = blobs()
        m = MLP(CLS, np.random.default_rng(0))
        train(m, ds, TrainConfig(batch_size=20, iterations=300, lr=1e-2, objective="nll"))
        assert np.mean(np.argmax(m.predict(ds.inputs, None), 1) == ds.targets) > 0.8


class TestEnsemble:
    def test_identical_seeds_reduce_to_single_member(self, rng):
        ens = Ensemble(CLS, 3, member_seeds=[7, 7, 7])
        single = MLP(CLS, np.random.default_rng(7))
        x = rng.normal(size=(6, 3))
        np.testing.assert_allclose(ens.predict(x), single.predict(x, None), atol=1e-15)

    def test_distinct_members(self, rng):
        ens = Ensemble(CLS, 5, seed=3)
        assert len(set(ens.seeds)) == 5
        x = rng.normal(size=(2, 3))
        outs = ens.member_outputs(x)
        assert not np.array_equal(outs[0], outs[1])

    def test_fit_trains_every_member(self):
        ens = Ensemble(CLS, 2, seed=1)
        before = [m.params["layer1.weight"].data.copy() for m in ens.members]
        _, traces = ens.fit(blobs(), TrainConfig(batch_size=20, iterations=5))
        assert len(traces) == 2
        for m, b in zip(ens.members, before):
            assert not np.array_equal(m.params["layer1.weight"].data, b)

    def test_regression_mixture(self, rng):
        ens = Ensemble(REG, 3, seed=0)
        mean, var = ens.predict(rng.normal(size=(4, 1)))
        assert mean.shape == (4, 1) and np.all(var > 0)

    def test_attack_loss_is_mixture_nll(self, rng):
        ens = Ensemble(CLS, 2, seed=0)
        x, y = rng.normal(size=(3, 3)), np.array([0, 1, 2])
        probs = ens.predict(x)
        want = -np.log(probs[np.arange(3), y]).sum()
        assert ens.attack_loss(x, y, rng).item() == pytest.approx(want, rel=1e-12)

    def test_needs_two_members(self):
        with pytest.raises(ValueError):
            Ensemble(CLS, 1)


class TestVmg:
    def test_kl_sums_layers(self):
        m = VmgMLP(CLS)
        want = sum(kl_to_standard(m.posterior(n)).item() for n in m.weight_names())
        assert m.kl().item() == pytest.approx(want, rel=1e-12)

    def test_one_draw_shared_across_batch(self, rng):
        m = VmgMLP(Architecture([1, 4, 1], task="regression", noise_std=1.0), rng, posterior_init=0.5)
        x = np.zeros((3, 1))
        with ad.no_grad():
            out = m.forward(x, m.sample_weights(rng)).data
        np.testing.assert_array_equal(out, np.repeat(out[:1], 3, axis=0))

    def test_objective_gradient(self, rng):
        m = VmgMLP(CLS, rng, posterior_init=0.1)
        x, y = rng.normal(size=(4, 3)), rng.integers(0, 4, size=4)
        cfg = TrainConfig(objective="vb", samples=2)
        loss = lambda: m.objective(x, y, np.random.default_rng(5), cfg, 20).loss
        names = sorted(m.params)
        loss().backward()

        def value(*arrays):
            old = [m.params[n].data for n in names]
            for n, a in zip(names, arrays):
                m.params[n].data = a
            v = loss().item()
            for n, a in zip(names, old):
                m.params[n].data = a
            return v

        for n, want in zip(names, numeric_grad(value, [m.params[n].data.copy() for n in names])):
            assert rel_err(m.params[n].grad, want) < 1e-4, n

    def test_trains_and_predicts(self):
        ds = blobs()
        m = VmgMLP(CLS, np.random.default_rng(0))
        train(m, ds, TrainConfig(batch_size=20, iterations=300, lr=1e-2, objective="vb"))
        probs = m.predict(ds.inputs, np.random.default_rng(1), 20)
        assert np.mean(np.argmax(probs, 1) == ds.targets) > 0.8
        assert m.average_posterior_variance() > 0
