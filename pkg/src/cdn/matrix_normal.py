"""Matrix-variate normal distributions with diagonal covariance factors.

``MN(M, diag(a), diag(b))`` over an ``r x c`` matrix is the Gaussian on
``vec(W)`` (column-major) with mean ``vec(M)`` and covariance
``diag(b) kron diag(a)``, so entry ``W[i, j]`` has variance ``a[i] * b[j]``
and all entries are independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DomainError, ShapeError, Tensor

LOG_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class MatrixNormalParams:
    """Mean ``M`` (r x c), row factors ``a`` (1 x r), column factors ``b`` (1 x c).

    Fields may be :class:`Tensor` or plain arrays; they are coerced to tensors.
    """

    M: Tensor
    a: Tensor
    b: Tensor

    def __post_init__(self):
        self.M = ad._wrap(self.M)
        self.a = _as_row(self.a)
        self.b = _as_row(self.b)
        r, c = self.M.shape
        if self.a.shape != (1, r) or self.b.shape != (1, c):
            raise ShapeError(f"factor shapes {self.a.shape}, {self.b.shape} do not fit mean {self.M.shape}")

    @property
    def shape(self) -> tuple:
        return self.M.shape

    @property
    def num_params(self) -> int:
        r, c = self.shape
        return r * c + r + c

    def validate(self) -> None:
        if np.any(self.a.data <= 0) or np.any(self.b.data <= 0):
            raise DomainError("covariance factors a and b must be strictly positive")

    def covariance(self) -> np.ndarray:
        """Dense ``rc x rc`` covariance of column-major ``vec(W)``."""
        return np.kron(np.diag(self.b.data[0]), np.diag(self.a.data[0]))


def _as_row(x) -> Tensor:
    t = ad._wrap(x)
    if t.shape[0] != 1:
        if t.shape[1] == 1:
            return Tensor(t.data.T) if not t.requires_grad else ad.transpose(t)
        raise ShapeError(f"expected a vector, got shape {t.shape}")
    return t


def sample(p: MatrixNormalParams, noise) -> Tensor:
    """Reparametrized draw ``W = M + diag(sqrt(a)) E diag(sqrt(b))``."""
    p.validate()
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != p.shape:
        raise ShapeError(f"noise shape {noise.shape} differs from parameter shape {p.shape}")
    row_sd = ad.transpose(ad.sqrt(p.a))  # r x 1
    col_sd = ad.sqrt(p.b)  # 1 x c
    return ad.add(p.M, ad.mul(ad.mul(row_sd, noise), col_sd))


def kl_to_standard(p: MatrixNormalParams) -> Tensor:
    """Closed-form ``KL(MN(M, diag(a), diag(b)) || MN(0, I, I))``.

    With covariance ``diag(b) kron diag(a)`` the trace term factorizes into
    ``sum(a) * sum(b)`` and the log-determinant into
    ``c * sum(log a) + r * sum(log b)``.
    """
    p.validate()
    r, c = p.shape
    trace = ad.mul(ad.reduce_sum(p.a), ad.reduce_sum(p.b))
    mean_sq = ad.reduce_sum(ad.square(p.M))
    log_a = ad.reduce_sum(ad.log(ad.clamp_min(p.a, LOG_FLOOR)))
    log_b = ad.reduce_sum(ad.log(ad.clamp_min(p.b, LOG_FLOOR)))
    total = trace + mean_sq - float(r * c) - ad.scale(log_a, c) - ad.scale(log_b, r)
    return ad.scale(total, 0.5)


def kl_to_standard_rows(mean_sq: Tensor, a: Tensor, b: Tensor) -> Tensor:
    """Row-batched KL for many MVNs sharing one shape.

    ``mean_sq`` is ``n x 1`` (squared Frobenius norms of the means), ``a`` is
    ``n x r`` and ``b`` is ``n x c``.  Returns ``n x 1``.
    """
    if np.any(a.data <= 0) or np.any(b.data <= 0):
        raise DomainError("covariance factors a and b must be strictly positive")
    r, c = a.shape[1], b.shape[1]
    trace = ad.mul(ad.reduce_sum(a, axis=1), ad.reduce_sum(b, axis=1))
    log_a = ad.reduce_sum(ad.log(ad.clamp_min(a, LOG_FLOOR)), axis=1)
    log_b = ad.reduce_sum(ad.log(ad.clamp_min(b, LOG_FLOOR)), axis=1)
    total = trace + mean_sq - float(r * c) - ad.scale(log_a, c) - ad.scale(log_b, r)
    return ad.scale(total, 0.5)


def log_density(p: MatrixNormalParams, W) -> float:
    """Log-density of ``W`` under ``p`` (plain numpy, no graph)."""
    p.validate()
    W = np.asarray(W, dtype=np.float64)
    var = p.a.data.T * p.b.data
    return float(-0.5 * np.sum(LOG_2PI + np.log(var) + (W - p.M.data) ** 2 / var))


def log_prob_gaussian(y, mu, log_var) -> Tensor:
    """Diagonal Gaussian log-likelihood summed over target dims, ``n x 1``."""
    y = ad._wrap(y)
    diff = ad.sub(y, mu)
    inv_var = ad.exp(ad.neg(log_var))
    per_dim = ad.scale(log_var, -0.5) - ad.scale(ad.mul(ad.square(diff), inv_var), 0.5)
    return ad.sub(ad.reduce_sum(per_dim, axis=1), 0.5 * LOG_2PI * mu.shape[1])


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise IndexError(f"labels must lie in [0, {num_classes}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.astype(np.int64)] = 1.0
    return out


def log_prob_categorical(logits, labels) -> Tensor:
    """``log_softmax(logits)[label]`` per row, ``n x 1``."""
    logits = ad._wrap(logits)
    mask = one_hot(labels, logits.shape[1])
    if mask.shape[0] != logits.shape[0]:
        raise ShapeError(f"{mask.shape[0]} labels for {logits.shape[0]} rows of logits")
    return ad.reduce_sum(ad.mul(ad.log_softmax(logits), mask), axis=1)
