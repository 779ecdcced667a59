"""Compound density networks built from probabilistic hypernetworks.

The predictive network ``f`` is an MLP whose layer-``l`` weight matrix (bias
row included) is drawn per example from a matrix normal whose parameters are
emitted by a small hypernetwork fed with the previous hidden state:

    r = d_{l-1} + 1,  c = d_l
    (z, a~, b~) = g_l([h_{l-1}, 1])          # widths r, r, c
    M_l = diag(z) @ template_l
    a_l = softplus(a~) + 1e-6,  b_l = softplus(b~) + 1e-6
    W_l ~ MN(M_l, diag(a_l), diag(b_l))
    h_l = act([h_{l-1}, 1] @ W_l)

Two sampling routes give the same distribution over outputs:

``"weights"``
    draws the full ``r x c`` matrix for every example (reference route,
    expensive for wide layers);
``"local"``
    draws the pre-activation directly.  Given ``u = [h_{l-1}, 1]``, the product
    ``u @ W_l`` is Gaussian with mean ``(u * z) @ template`` and independent
    coordinates of variance ``b_j * sum_i a_i u_i^2``, so sampling it needs
    only ``c`` normals per example.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matrix_normal import (
    MatrixNormalParams,
    kl_to_standard,
    kl_to_standard_rows,
    log_prob_categorical,
    log_prob_gaussian,
    sample,
)

FACTOR_FLOOR = 1e-6
POSTERIOR_FLOOR = 1e-10
TASKS = ("classification", "regression")
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


def inverse_softplus(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass
class Architecture:
    """Layer sizes ``[d_0, ..., d_L]`` of the predictive network and its hypernetworks.

    For regression the component is Gaussian.  With ``noise_std=None`` the
    network emits mean and log-variance (``d_L = 2 * target_dim``); with a
    fixed ``noise_std`` it emits the mean only (``d_L = target_dim``).
    """

    layer_sizes: list
    task: str = "classification"
    hyper_hidden: list = field(default_factory=lambda: [50])
    hyper_activation: str = "relu"
    activation: str = "relu"
    noise_std: Optional[float] = None

    def __post_init__(self):
        self.layer_sizes = [int(d) for d in self.layer_sizes]
        self.hyper_hidden = [int(d) for d in self.hyper_hidden]
        self.validate()

    def validate(self) -> None:
        if len(self.layer_sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output size (L >= 1)")
        if any(d < 1 for d in self.layer_sizes + self.hyper_hidden):
            raise ValueError("all layer widths must be positive")
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.noise_std is not None:
            if self.task != "regression":
                raise ValueError("noise_std applies to regression only")
            if not self.noise_std > 0:
                raise ValueError("noise_std must be positive")
        elif self.task == "regression" and self.layer_sizes[-1] % 2:
            raise ValueError("regression output width must be even (mean and log-variance)")
        if self.hyper_activation not in ACTIVATIONS:
            raise ValueError(f"hyper_activation must be one of {sorted(ACTIVATIONS)}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(ACTIVATIONS)}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def output_dim(self) -> int:
        d = self.layer_sizes[-1]
        return d if self.task == "classification" or self.noise_std is not None else d // 2

    def gaussian_params(self, out):
        """Split a regression output into ``(mean, log_var)``; works on arrays and tensors."""
        k = self.output_dim
        if self.noise_std is not None:
            log_var = 2.0 * math.log(self.noise_std)
            if isinstance(out, Tensor):
                return out, Tensor(np.full(out.shape, log_var))
            return out, np.full(out.shape, log_var)
        if isinstance(out, Tensor):
            return ad.cols(out, 0, k), ad.cols(out, k, 2 * k)
        return out[:, :k], out[:, k:]

    def weight_shapes(self) -> list:
        """Shapes ``(d_{l-1} + 1, d_l)`` of the predictive-network weight matrices."""
        return [(self.layer_sizes[i] + 1, self.layer_sizes[i + 1]) for i in range(self.num_layers)]

    def hypernet_shapes(self, layer: int) -> list:
        r, c = self.weight_shapes()[layer]
        widths = [r] + self.hyper_hidden + [2 * r + c]
        # first matrix consumes the already bias-augmented state
        return [(widths[0], widths[1])] + [(widths[k] + 1, widths[k + 1]) for k in range(1, len(widths) - 1)]

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LayerMixing:
    """Per-row mixing parameters for one layer: scales ``z`` (n x r), factors ``a`` (n x r), ``b`` (n x c)."""

    z: Tensor
    a: Tensor
    b: Tensor
    template: Tensor

    def mean_sq_norm(self) -> Tensor:
        """``||diag(z) @ template||_F^2`` per row, n x 1."""
        row_norms = ad.reduce_sum(ad.square(self.template), axis=1)
        return ad.matmul(ad.square(self.z), row_norms)

    def average_variance(self) -> np.ndarray:
        """Mean of ``a_i * b_j`` over the entries of the matrix, per row."""
        r, c = self.a.shape[1], self.b.shape[1]
        return self.a.data.sum(axis=1) * self.b.data.sum(axis=1) / (r * c)

    def params_for(self, row: int) -> MatrixNormalParams:
        z = self.z.data[row]
        return MatrixNormalParams(z[:, None] * self.template.data, self.a.data[row], self.b.data[row])


@dataclass
class ForwardTrace:
    """Hidden states ``h_0 .. h_L`` (sample-major rows) and mixing parameters per layer."""

    hidden: list
    mixing: list
    samples: int
    batch: int

    @property
    def output(self) -> Tensor:
        return self.hidden[-1]


def _ones(n: int) -> np.ndarray:
    return np.ones((n, 1))


class CompoundDensityNetwork:
    """A CDN with point-estimated (``bayesian=False``) or variational (``bayesian=True``) hypernetworks.

    Parameters are kept in ``self.params`` (name -> Tensor).  In the Bayesian
    case every hypernetwork matrix and every mean template has a matrix-normal
    variational posterior stored as ``name``, ``name.rho_a`` and ``name.rho_b``
    with factors ``softplus(rho) + 1e-10``.
    """

    def __init__(
        self,
        arch: Architecture,
        rng: Optional[np.random.Generator] = None,
        bayesian: bool = False,
        sampling: str = "local",
        factor_bias: float = 0.0,
        posterior_init: float = 1e-3,
    ):
        if sampling not in ("local", "weights"):
            raise ValueError(f"sampling must be 'local' or 'weights', got {sampling!r}")
        self.arch = arch
        self.bayesian = bool(bayesian)
        self.sampling = sampling
        self.factor_bias = float(factor_bias)
        self.posterior_init = float(posterior_init)
        self.params: dict = {}
        self._init_params(rng if rng is not None else np.random.default_rng(0))

    @property
    def kind(self) -> str:
        return "vb-cdn" if self.bayesian else "ml-cdn"

    @property
    def task(self) -> str:
        return self.arch.task

    def psi_names(self) -> list:
        names = []
        for l in range(self.arch.num_layers):
            names.append(f"layer{l + 1}.template")
            names += [f"layer{l + 1}.hyper{k}" for k in range(len(self.arch.hyper_hidden) + 1)]
        return names

    def _init_params(self, rng: np.random.Generator) -> None:
        arch = self.arch
        gain = 2.0 if arch.hyper_activation == "relu" else 1.0
        point = {}
        for l, (r, c) in enumerate(arch.weight_shapes()):
            point[f"layer{l + 1}.template"] = rng.normal(0.0, math.sqrt(2.0 / r), size=(r, c))
            shapes = arch.hypernet_shapes(l)
            for k, (fan_in, fan_out) in enumerate(shapes):
                if k == len(shapes) - 1:
                    w = np.zeros((fan_in, fan_out))
                    # output bias row: z-head 1 so that M_l starts at the template
                    w[-1, :r] = 1.0
                    w[-1, r:] = self.factor_bias
                else:
                    w = rng.normal(0.0, math.sqrt(gain / fan_in), size=(fan_in, fan_out))
                    w[-1] = 0.0
                point[f"layer{l + 1}.hyper{k}"] = w
        rho = inverse_softplus(self.posterior_init)
        for name, value in point.items():
            self.params[name] = Tensor(value, requires_grad=True)
            if self.bayesian:
                r, c = value.shape
                self.params[name + ".rho_a"] = Tensor(np.full((1, r), rho), requires_grad=True)
                self.params[name + ".rho_b"] = Tensor(np.full((1, c), rho), requires_grad=True)

    def parameters(self) -> dict:
        return self.params

    # ------------------------------------------------------------------
    # hypernetwork parameters psi

    def posterior(self, name: str) -> MatrixNormalParams:
        """Variational posterior over one named matrix of psi."""
        if not self.bayesian:
            raise ValueError("posterior() is only defined for Bayesian CDNs")
        a = ad.add(ad.softplus(self.params[name + ".rho_a"]), POSTERIOR_FLOOR)
        b = ad.add(ad.softplus(self.params[name + ".rho_b"]), POSTERIOR_FLOOR)
        return MatrixNormalParams(self.params[name], a, b)

    def psi_mean(self) -> dict:
        return {name: self.params[name] for name in self.psi_names()}

    def sample_psi(self, rng) -> dict:
        """One reparametrized draw of psi (the point estimate when not Bayesian)."""
        if not self.bayesian:
            return self.psi_mean()
        return {name: sample(self.posterior(name), rng.standard_normal(self.params[name].shape)) for name in self.psi_names()}

    def kl_posterior(self) -> Tensor:
        """``KL(q(psi; omega) || prod MN(0, I, I))``; zero-valued for non-Bayesian models."""
        if not self.bayesian:
            return Tensor(0.0)
        total = None
        for name in self.psi_names():
            kl = kl_to_standard(self.posterior(name))
            total = kl if total is None else total + kl
        return total

    def average_posterior_variance(self) -> float:
        """Mean of ``a_i * b_j`` over every entry of every psi matrix."""
        num, den = 0.0, 0
        with ad.no_grad():
            for name in self.psi_names():
                p = self.posterior(name)
                r, c = p.shape
                num += p.a.data.sum() * p.b.data.sum()
                den += r * c
        return num / den

    # ------------------------------------------------------------------
    # forward passes

    def _hypernet(self, layer: int, u: Tensor, psi: dict) -> Tensor:
        act = ACTIVATIONS[self.arch.hyper_activation]
        depth = len(self.arch.hyper_hidden) + 1
        for k in range(depth):
            if k > 0:
                u = ad.concat([u, _ones(u.shape[0])], axis=1)
            u = ad.matmul(u, psi[f"layer{layer + 1}.hyper{k}"])
            if k < depth - 1:
                u = act(u)
        return u

    def layer_mixing(self, layer: int, u: Tensor, psi: dict) -> LayerMixing:
        """Mixing parameters of layer ``layer`` (0-based) from the bias-augmented state ``u``."""
        r, c = self.arch.weight_shapes()[layer]
        g = self._hypernet(layer, u, psi)
        z = ad.cols(g, 0, r)
        a = ad.add(ad.softplus(ad.cols(g, r, 2 * r)), FACTOR_FLOOR)
        b = ad.add(ad.softplus(ad.cols(g, 2 * r, 2 * r + c)), FACTOR_FLOOR)
        return LayerMixing(z, a, b, psi[f"layer{layer + 1}.template"])

    def forward(self, x, psi: dict, noise, samples: int = 1) -> ForwardTrace:
        """Sampled forward pass.

        ``x`` is ``n x d_0``.  The batch is tiled ``samples`` times (row
        ``s * n + m`` holds sample ``s`` of example ``m``) and every row gets
        its own weight draw.  ``noise`` is anything with a
        ``standard_normal(shape)`` method, typically ``np.random.Generator``.
        """
        if samples < 1:
            raise ValueError("samples must be >= 1")
        x = ad._wrap(x)
        if x.shape[1] != self.arch.layer_sizes[0]:
            raise ad.ShapeError(f"input width {x.shape[1]} != {self.arch.layer_sizes[0]}")
        n = x.shape[0]
        h = ad.tile_rows(x, samples) if samples > 1 else x
        rows = h.shape[0]
        act = ACTIVATIONS[self.arch.activation]
        hidden, mixing = [h], []
        L = self.arch.num_layers
        for l in range(L):
            u = ad.concat([h, _ones(rows)], axis=1)
            mix = self.layer_mixing(l, u, psi)
            mixing.append(mix)
            if self.sampling == "local":
                pre = self._local_preactivation(u, mix, noise)
            else:
                pre = self._weight_preactivation(u, mix, noise)
            h = act(pre) if l < L - 1 else pre
            hidden.append(h)
        return ForwardTrace(hidden, mixing, samples, n)

    @staticmethod
    def _local_preactivation(u: Tensor, mix: LayerMixing, noise) -> Tensor:
        mean = ad.matmul(ad.mul(u, mix.z), mix.template)
        var = ad.mul(ad.reduce_sum(ad.mul(mix.a, ad.square(u)), axis=1), mix.b)
        eps = noise.standard_normal(mean.shape)
        return ad.add(mean, ad.mul(ad.sqrt(var), eps))

    @staticmethod
    def _weight_preactivation(u: Tensor, mix: LayerMixing, noise) -> Tensor:
        out = []
        for m in range(u.shape[0]):
            M = ad.mul(ad.transpose(ad.rows(mix.z, m, m + 1)), mix.template)
            p = MatrixNormalParams(M, ad.rows(mix.a, m, m + 1), ad.rows(mix.b, m, m + 1))
            W = sample(p, noise.standard_normal(p.shape))
            out.append(ad.matmul(ad.rows(u, m, m + 1), W))
        return ad.concat(out, axis=0)

    def mixing_params(self, x, psi: Optional[dict] = None, noise=None) -> list:
        """Per-layer :class:`LayerMixing` for a single sampled pass over ``x``.

        Layer 1 depends on ``x`` only; deeper layers depend on the sampled
        hidden states, hence ``noise``.
        """
        psi = self.psi_mean() if psi is None else psi
        noise = np.random.default_rng(0) if noise is None else noise
        with ad.no_grad():
            return self.forward(x, psi, noise).mixing

    # ------------------------------------------------------------------
    # likelihood pieces used by the objectives

    def log_likelihood(self, output: Tensor, y, samples: int) -> Tensor:
        """Component log-density of each tiled row, reshaped to ``samples x n``."""
        if self.task == "classification":
            labels = np.tile(np.asarray(y).reshape(-1), samples)
            lp = log_prob_categorical(output, labels)
        else:
            y = np.asarray(y, dtype=np.float64).reshape(-1, self.arch.output_dim)
            mu, log_var = self.arch.gaussian_params(output)
            lp = log_prob_gaussian(np.tile(y, (samples, 1)), mu, log_var)
        return ad.reshape(lp, (samples, lp.shape[0] // samples))

    def mixing_kl(self, trace: ForwardTrace) -> Tensor:
        """Per-example KL of the mixing distribution to ``prod MN(0, I, I)``, ``1 x n``.

        Deeper layers are conditioned on sampled hidden states, so the joint
        KL is the sample average of the sum of per-layer conditional KLs.
        """
        total = None
        for mix in trace.mixing:
            kl = kl_to_standard_rows(mix.mean_sq_norm(), mix.a, mix.b)
            total = kl if total is None else total + kl
        total = ad.reshape(total, (trace.samples, trace.batch))
        return ad.reduce_mean(total, axis=0)

    # ------------------------------------------------------------------
    # prediction

    def _chunks(self, n: int, samples: int, max_rows: int = 20000):
        per = max(1, max_rows // max(n, 1))
        done = 0
        while done < samples:
            k = min(per, samples - done)
            yield k
            done += k

    def sample_outputs(self, x, rng, samples: int = 100) -> list:
        """``samples`` sampled outputs ``phi_s(x)`` as arrays of shape ``n x d_L``.

        Bayesian models draw a fresh psi for every sample (joint samples of
        psi and theta).
        """
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        outs = []
        with ad.no_grad():
            if self.bayesian:
                for _ in range(samples):
                    psi = self.sample_psi(rng)
                    outs.append(self.forward(x, psi, rng).output.data)
            else:
                psi = self.psi_mean()
                for k in self._chunks(n, samples):
                    out = self.forward(x, psi, rng, samples=k).output.data
                    outs += [out[s * n : (s + 1) * n] for s in range(k)]
        return outs

    def predict(self, x, rng, samples: int = 100):
        """Monte-Carlo predictive distribution.

        Classification: ``n x K`` class probabilities.  Regression: tuple of
        mixture mean and mixture variance, each ``n x dim``.
        """
        return mixture_predictive(self.sample_outputs(x, rng, samples), self.arch)

    def average_mixing_variance(self, x, rng, samples: int = 100, at_mean: bool = False) -> np.ndarray:
        """Per-input mean of ``a_i * b_j`` over all weight entries, averaged over samples.

        With ``at_mean`` the hypernetworks use the posterior mean of psi, so
        only the sampled hidden states vary; otherwise psi is drawn too.
        """
        x = np.asarray(x, dtype=np.float64)
        sizes = [r * c for r, c in self.arch.weight_shapes()]
        acc = np.zeros(x.shape[0])
        with ad.no_grad():
            for _ in range(samples):
                psi = self.psi_mean() if at_mean else self.sample_psi(rng)
                trace = self.forward(x, psi, rng)
                acc += sum(m.average_variance() * s for m, s in zip(trace.mixing, sizes)) / sum(sizes)
        return acc / samples

    def attack_loss(self, x: Tensor, y, rng) -> Tensor:
        """Negative log-likelihood of a single sampled network (one psi, one theta)."""
        psi = self.sample_psi(rng)
        trace = self.forward(x, psi, rng)
        return ad.neg(ad.reduce_sum(self.log_likelihood(trace.output, y, 1)))

    def metadata(self) -> dict:
        return {
            "kind": self.kind,
            "architecture": self.arch.to_dict(),
            "sampling": self.sampling,
            "factor_bias": self.factor_bias,
            "posterior_init": self.posterior_init,
        }


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def mixture_predictive(outputs: list, arch: Architecture):
    """Uniform mixture over per-sample component parameters.

    Classification averages softmaxes.  Regression returns the mixture mean
    and the law-of-total-variance mixture variance.
    """
    if arch.task == "classification":
        return np.mean([softmax(o) for o in outputs], axis=0)
    params = [arch.gaussian_params(o) for o in outputs]
    mus = np.stack([mu for mu, _ in params])
    variances = np.stack([np.exp(lv) for _, lv in params])
    mean = mus.mean(axis=0)
    var = variances.mean(axis=0) + ((mus - mean) ** 2).mean(axis=0)
    return mean, var
