"""Training objectives, Adam and the minibatch training loop."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset, batches, split
from .model import CompoundDensityNetwork
from .seeding import derive, rng_for

logger = logging.getLogger(__name__)

OBJECTIVES = ("ml", "vb", "nll")
LAMBDA_GRID = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, nll: float, kl: float):
        super().__init__(f"non-finite loss at iteration {iteration}: nll_term={nll!r}, kl_term={kl!r}")
        self.iteration = iteration
        self.nll = nll
        self.kl = kl


@dataclass
class TrainConfig:
    batch_size: int = 200
    samples: int = 1
    lam: float = 1e-4
    lr: float = 1e-3
    iterations: int = 20000
    seed: int = 0
    objective: str = "ml"
    log_every: int = 100
    grad_clip: Optional[float] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0 when set")


class Objective(NamedTuple):
    loss: Tensor
    nll: float
    kl: float


# ---------------------------------------------------------------------------
# objectives


def _log_mean_likelihood(model: CompoundDensityNetwork, trace, y) -> Tensor:
    ll = model.log_likelihood(trace.output, y, trace.samples)
    return ad.reduce_sum(ad.log_mean_exp(ll, axis=0))


def ml_objective(model: CompoundDensityNetwork, x, y, samples: int, lam: float, noise) -> Objective:
    """Negated regularized log-likelihood, summed over the batch.

    ``-[sum_m log (1/S) sum_s p(y_m; phi_s(x_m)) - lam * sum_m KL_m]``
    """
    trace = model.forward(x, model.psi_mean(), noise, samples)
    nll = ad.neg(_log_mean_likelihood(model, trace, y))
    kl = ad.reduce_sum(model.mixing_kl(trace))
    loss = ad.add(nll, ad.scale(kl, lam)) if lam else nll
    return Objective(loss, nll.item(), kl.item())


def vb_objective(model: CompoundDensityNetwork, x, y, samples: int, n_total: int, noise) -> Objective:
    """Negated ELBO estimate from one psi draw and ``samples`` theta draws.

    The likelihood term is rescaled by ``N / M``; the KL is counted once.
    """
    if not model.bayesian:
        raise ValueError("vb_objective needs a Bayesian CDN")
    n_batch = np.asarray(x).shape[0] if not isinstance(x, Tensor) else x.shape[0]
    psi = model.sample_psi(noise)
    trace = model.forward(x, psi, noise, samples)
    nll = ad.scale(_log_mean_likelihood(model, trace, y), -n_total / n_batch)
    kl = model.kl_posterior()
    return Objective(ad.add(nll, kl), nll.item(), kl.item())


def compute_objective(model, x, y, config: TrainConfig, noise, n_total: int) -> Objective:
    if isinstance(model, CompoundDensityNetwork):
        if config.objective == "ml":
            if model.bayesian:
                raise ValueError("objective 'ml' requires a non-Bayesian CDN")
            return ml_objective(model, x, y, config.samples, config.lam, noise)
        if config.objective == "vb":
            return vb_objective(model, x, y, config.samples, n_total, noise)
        raise ValueError(f"objective {config.objective!r} does not apply to a CDN")
    return model.objective(x, y, noise, config, n_total)


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """One bias-corrected Adam descent step on arrays; returns the new values.

    ``state`` is advanced in place.  Missing gradients count as zero.
    """
    state.step += 1
    t = state.step
    out = {}
    for name, value in params.items():
        g = grads.get(name)
        g = np.zeros_like(value) if g is None else g
        if g.shape != value.shape:
            raise ad.ShapeError(f"gradient shape {g.shape} != parameter shape {value.shape} for {name!r}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


class Adam:
    """Adam over a dict of leaf tensors, updated in place."""

    def __init__(self, params: dict, lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, clip: Optional[float] = None) -> float:
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if clip is not None and norm > clip:
            grads = {k: g * (clip / norm) for k, g in grads.items()}
        new = adam_step({k: p.data for k, p in self.params.items()}, grads, self.state, self.lr)
        for k, p in self.params.items():
            p.data = new[k]
        return norm


# ---------------------------------------------------------------------------
# loop


@dataclass
class LossTrace:
    """Logged rows ``(iteration, nll_term, kl_term, total)`` plus every total."""

    rows: list = field(default_factory=list)
    totals: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "nll_term", "kl_term", "total"])
            for it, nll, kl, total in self.rows:
                w.writerow([it, repr(float(nll)), repr(float(kl)), repr(float(total))])


def train(model, dataset: Dataset, config: TrainConfig) -> tuple:
    """Minibatch loop: draw a batch, sample, evaluate the objective, take an Adam step.

    Deterministic given ``config.seed``.  Returns ``(model, LossTrace)``.
    """
    config.validate()
    stream = batches(dataset, min(config.batch_size, len(dataset)), derive(config.seed, "batches"))
    noise = rng_for(config.seed, "noise")
    opt = Adam(model.parameters(), config.lr)
    trace = LossTrace()
    for it in range(config.iterations):
        x, y = next(stream)
        obj = compute_objective(model, x, y, config, noise, len(dataset))
        total = obj.loss.item()
        if not (np.isfinite(total) and np.isfinite(obj.nll) and np.isfinite(obj.kl)):
            raise NumericalError(it, obj.nll, obj.kl)
        opt.zero_grad()
        obj.loss.backward()
        opt.step(config.grad_clip)
        trace.totals.append(total)
        if it % config.log_every == 0 or it == config.iterations - 1:
            trace.rows.append((it, obj.nll, obj.kl, total))
            logger.debug("iter %d nll %.4f kl %.4f total %.4f", it, obj.nll, obj.kl, total)
    return model, trace


def accuracy(model, dataset: Dataset, rng, samples: int = 100) -> float:
    probs = model.predict(dataset.inputs, rng, samples)
    return float(np.mean(np.argmax(probs, axis=1) == dataset.targets))


def select_lambda(build, dataset: Dataset, config: TrainConfig, grid=LAMBDA_GRID, val_fraction: float = 0.1, samples: int = 100):
    """Pick the regularization strength with the best validation accuracy.

    ``build()`` must return a freshly initialized model.  Returns
    ``(best_lambda, {lambda: accuracy})``.
    """
    train_set, val_set = split(dataset, val_fraction, derive(config.seed, "validation"))
    scores = {}
    for lam in grid:
        cfg = TrainConfig(**{**config.__dict__, "lam": float(lam)})
        model, _ = train(build(), train_set, cfg)
        scores[float(lam)] = accuracy(model, val_set, rng_for(config.seed, "validation-eval"), samples)
        logger.info("lambda %g: validation accuracy %.4f", lam, scores[float(lam)])
    best = max(scores, key=lambda k: (scores[k], k))
    return best, scores
