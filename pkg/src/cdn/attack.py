"""FGSM adversarial examples and robustness sweeps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .metrics import predictive_entropy
from .seeding import derive

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(11))


def input_gradient(model, x: np.ndarray, y, rng) -> np.ndarray:
    """Gradient of ``model.attack_loss`` with respect to the inputs."""
    xt = Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    model.attack_loss(xt, y, rng).backward()
    return xt.grad if xt.grad is not None else np.zeros_like(xt.data)


def fgsm(model, x, y, eps: float, rng, passes: int = 1, clip=(0.0, 1.0)) -> np.ndarray:
    """``x + eps * sign(g)`` clipped to the pixel range.

    ``g`` is the input gradient of the single-sample NLL, averaged over
    ``passes`` independent forward-backward passes.  ``sign(0) = 0``.
    """
    if eps < 0:
        raise ValueError(f"eps must be >= 0, got {eps}")
    if passes < 1:
        raise ValueError("passes must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if eps == 0:
        return x.copy()
    g = sum(input_gradient(model, x, y, rng) for _ in range(passes)) / passes
    adv = x + eps * np.sign(g)
    if clip is not None:
        adv = np.clip(adv, clip[0], clip[1])
    # x + eps can round so that (x + eps) - x exceeds eps by an ulp; step
    # those entries back towards x until the budget holds in float64
    over = np.abs(adv - x) > eps
    while over.any():
        adv[over] = np.nextafter(adv[over], x[over])
        over = np.abs(adv - x) > eps
    return adv


@dataclass
class CurvePoint:
    eps: float
    accuracy: float
    mean_entropy: float


def robustness_sweep(model, x, y, grid=DEFAULT_GRID, seed: int = 0, samples: int = 100, passes: int = 1) -> list:
    """Attack ``(x, y)`` at every budget in ``grid`` and evaluate accuracy and entropy.

    Each grid point uses the same evaluation seed, so the ``eps = 0`` entry
    equals a clean evaluation with that seed.
    """
    grid = [float(e) for e in grid]
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValueError("eps grid must be sorted")
    y = np.asarray(y)
    out = []
    for k, eps in enumerate(grid):
        attack_rng = np.random.default_rng(derive(seed, f"attack{k}"))
        adv = fgsm(model, x, y, eps, attack_rng, passes)
        probs = model.predict(adv, np.random.default_rng(derive(seed, "eval")), samples)
        acc = float(np.mean(np.argmax(probs, axis=1) == y))
        out.append(CurvePoint(eps, acc, float(np.mean(predictive_entropy(probs)))))
    return out


def clean_evaluation(model, x, y, seed: int = 0, samples: int = 100) -> CurvePoint:
    probs = model.predict(np.asarray(x, dtype=np.float64), np.random.default_rng(derive(seed, "eval")), samples)
    acc = float(np.mean(np.argmax(probs, axis=1) == np.asarray(y)))
    return CurvePoint(0.0, acc, float(np.mean(predictive_entropy(probs))))
