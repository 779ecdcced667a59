"""Comparison models: MC-dropout, deep ensembles and VMG (matrix-normal posterior BNN)."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matrix_normal import MatrixNormalParams, kl_to_standard, log_prob_categorical, log_prob_gaussian, sample
from .model import ACTIVATIONS, Architecture, inverse_softplus, mixture_predictive, softmax
from .seeding import derive

POSTERIOR_FLOOR = 1e-10


def _ones(n: int) -> np.ndarray:
    return np.ones((n, 1))


def _component_log_prob(arch: Architecture, out: Tensor, y) -> Tensor:
    if arch.task == "classification":
        return log_prob_categorical(out, np.asarray(y).reshape(-1))
    mu, log_var = arch.gaussian_params(out)
    return log_prob_gaussian(np.asarray(y, dtype=np.float64).reshape(mu.shape), mu, log_var)


def _nll(arch, out, y):
    return ad.neg(ad.reduce_sum(_component_log_prob(arch, out, y)))


class MLP:
    """Plain MLP with bias rows absorbed into the weights; ``dropout > 0`` gives MC-dropout.

    Dropout masks (inverted scaling) are applied to hidden layers only, both
    during training and at prediction time.
    """

    def __init__(self, arch: Architecture, rng: Optional[np.random.Generator] = None, dropout: float = 0.0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.arch = arch
        self.dropout = float(dropout)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {}
        for l, (r, c) in enumerate(arch.weight_shapes()):
            w = rng.normal(0.0, math.sqrt(2.0 / r), size=(r, c))
            w[-1] = 0.0
            self.params[f"layer{l + 1}.weight"] = Tensor(w, requires_grad=True)

    @property
    def kind(self) -> str:
        return "mcd" if self.dropout > 0 else "mlp"

    @property
    def task(self) -> str:
        return self.arch.task

    def parameters(self) -> dict:
        return self.params

    def forward(self, x, rng=None) -> Tensor:
        act = ACTIVATIONS[self.arch.activation]
        h = ad._wrap(x)
        L = self.arch.num_layers
        for l in range(L):
            u = ad.concat([h, _ones(h.shape[0])], axis=1)
            h = ad.matmul(u, self.params[f"layer{l + 1}.weight"])
            if l < L - 1:
                h = act(h)
                if self.dropout > 0:
                    keep = rng.random(h.shape) >= self.dropout
                    h = ad.mul(h, keep / (1.0 - self.dropout))
        return h

    def objective(self, x, y, noise, config, n_total):
        from .training import Objective

        loss = _nll(self.arch, self.forward(x, noise), y)
        return Objective(loss, loss.item(), 0.0)

    def sample_outputs(self, x, rng, samples: int = 100) -> list:
        with ad.no_grad():
            if self.dropout == 0:
                return [self.forward(x).data]
            return [self.forward(x, rng).data for _ in range(samples)]

    def predict(self, x, rng, samples: int = 100):
        """Average over ``samples`` dropout masks (a single pass when ``dropout == 0``)."""
        return mixture_predictive(self.sample_outputs(x, rng, samples), self.arch)

    def attack_loss(self, x, y, rng) -> Tensor:
        return _nll(self.arch, self.forward(x, rng), y)

    def metadata(self) -> dict:
        return {"kind": self.kind, "architecture": self.arch.to_dict(), "dropout": self.dropout}


class DropoutMLP(MLP):
    def __init__(self, arch: Architecture, rng=None, dropout: float = 0.5):
        super().__init__(arch, rng, dropout)


def mcd_predict(model: MLP, x, rng, samples: int = 100):
    return model.predict(x, rng, samples)


class Ensemble:
    """Uniform mixture of independently initialized and trained MLPs."""

    kind = "ensemble"

    def __init__(self, arch: Architecture, members: int = 5, seed: int = 0, member_seeds=None):
        if members < 2:
            raise ValueError("an ensemble needs at least 2 members")
        self.arch = arch
        self.seeds = list(member_seeds) if member_seeds is not None else [derive(seed, f"member{i}") for i in range(members)]
        if len(self.seeds) != members:
            raise ValueError("member_seeds must have one entry per member")
        self.members = [MLP(arch, np.random.default_rng(s)) for s in self.seeds]

    @property
    def task(self) -> str:
        return self.arch.task

    def parameters(self) -> dict:
        return {f"member{i}.{k}": v for i, m in enumerate(self.members) for k, v in m.parameters().items()}

    def fit(self, dataset, config) -> tuple:
        """Train every member on the NLL with its own seed; returns ``(self, traces)``."""
        from .training import TrainConfig, train

        traces = []
        for member, s in zip(self.members, self.seeds):
            cfg = TrainConfig(**{**config.__dict__, "seed": int(s) % 2**63, "objective": "nll"})
            _, tr = train(member, dataset, cfg)
            traces.append(tr)
        return self, traces

    def member_outputs(self, x) -> list:
        with ad.no_grad():
            return [m.forward(x).data for m in self.members]

    def predict(self, x, rng=None, samples: int = 100):
        return mixture_predictive(self.member_outputs(x), self.arch)

    def attack_loss(self, x, y, rng) -> Tensor:
        """NLL of the mixture predictive."""
        lps = [_component_log_prob(self.arch, m.forward(x), y) for m in self.members]
        stacked = ad.concat(lps, axis=1)
        return ad.neg(ad.reduce_sum(ad.log_mean_exp(stacked, axis=1)))

    def metadata(self) -> dict:
        return {"kind": self.kind, "architecture": self.arch.to_dict(), "members": len(self.members), "member_seeds": [int(s) for s in self.seeds]}


def ensemble_train_predict(arch: Architecture, dataset, config, x_eval, members: int = 5):
    ens = Ensemble(arch, members, seed=config.seed)
    ens.fit(dataset, config)
    return ens.predict(x_eval)


class VmgMLP:
    """MLP with a diagonal matrix-normal variational posterior on each weight matrix.

    One weight draw is shared by the whole batch; the prior is ``MN(0, I, I)``.
    """

    kind = "vmg"

    def __init__(self, arch: Architecture, rng: Optional[np.random.Generator] = None, posterior_init: float = 1e-3):
        self.arch = arch
        self.posterior_init = float(posterior_init)
        rng = rng if rng is not None else np.random.default_rng(0)
        rho = inverse_softplus(self.posterior_init)
        self.params = {}
        for l, (r, c) in enumerate(arch.weight_shapes()):
            w = rng.normal(0.0, math.sqrt(2.0 / r), size=(r, c))
            w[-1] = 0.0
            name = f"layer{l + 1}.weight"
            self.params[name] = Tensor(w, requires_grad=True)
            self.params[name + ".rho_a"] = Tensor(np.full((1, r), rho), requires_grad=True)
            self.params[name + ".rho_b"] = Tensor(np.full((1, c), rho), requires_grad=True)

    @property
    def task(self) -> str:
        return self.arch.task

    def parameters(self) -> dict:
        return self.params

    def weight_names(self) -> list:
        return [f"layer{l + 1}.weight" for l in range(self.arch.num_layers)]

    def posterior(self, name: str) -> MatrixNormalParams:
        a = ad.add(ad.softplus(self.params[name + ".rho_a"]), POSTERIOR_FLOOR)
        b = ad.add(ad.softplus(self.params[name + ".rho_b"]), POSTERIOR_FLOOR)
        return MatrixNormalParams(self.params[name], a, b)

    def sample_weights(self, rng) -> list:
        return [sample(self.posterior(n), rng.standard_normal(self.params[n].shape)) for n in self.weight_names()]

    def forward(self, x, weights: list) -> Tensor:
        act = ACTIVATIONS[self.arch.activation]
        h = ad._wrap(x)
        for l, W in enumerate(weights):
            h = ad.matmul(ad.concat([h, _ones(h.shape[0])], axis=1), W)
            if l < len(weights) - 1:
                h = act(h)
        return h

    def kl(self) -> Tensor:
        total = None
        for n in self.weight_names():
            k = kl_to_standard(self.posterior(n))
            total = k if total is None else total + k
        return total

    def objective(self, x, y, noise, config, n_total):
        from .training import Objective

        n = np.asarray(x).shape[0]
        lps = [_component_log_prob(self.arch, self.forward(x, self.sample_weights(noise)), y) for _ in range(config.samples)]
        ll = ad.reduce_sum(ad.log_mean_exp(ad.concat(lps, axis=1), axis=1))
        nll = ad.scale(ll, -n_total / n)
        kl = self.kl()
        return Objective(ad.add(nll, kl), nll.item(), kl.item())

    def sample_outputs(self, x, rng, samples: int = 100) -> list:
        with ad.no_grad():
            return [self.forward(x, self.sample_weights(rng)).data for _ in range(samples)]

    def predict(self, x, rng, samples: int = 100):
        return mixture_predictive(self.sample_outputs(x, rng, samples), self.arch)

    def attack_loss(self, x, y, rng) -> Tensor:
        return _nll(self.arch, self.forward(x, self.sample_weights(rng)), y)

    def average_posterior_variance(self) -> float:
        num, den = 0.0, 0
        with ad.no_grad():
            for n in self.weight_names():
                p = self.posterior(n)
                r, c = p.shape
                num += p.a.data.sum() * p.b.data.sum()
                den += r * c
        return num / den

    def metadata(self) -> dict:
        return {"kind": self.kind, "architecture": self.arch.to_dict(), "posterior_init": self.posterior_init}


def vmg_train_predict(arch: Architecture, dataset, config, x_eval, rng, samples: int = 100):
    from .training import train

    model = VmgMLP(arch, np.random.default_rng(derive(config.seed, "init")))
    train(model, dataset, config)
    return model.predict(x_eval, rng, samples)


def entropy_rows(probs: np.ndarray) -> np.ndarray:
    p = np.clip(probs, 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return -np.sum(np.where(p > 0, p * np.log(p), 0.0), axis=1)


__all__ = [
    "MLP",
    "DropoutMLP",
    "Ensemble",
    "VmgMLP",
    "mcd_predict",
    "ensemble_train_predict",
    "vmg_train_predict",
    "softmax",
]
