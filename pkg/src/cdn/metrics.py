"""Uncertainty metrics: predictive entropy, entropy CDFs, MMC and AUROC."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata


class ContractError(ValueError):
    """Input violates a documented precondition."""


def _as_probs(probs) -> np.ndarray:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    if p.ndim != 2:
        raise ContractError(f"expected a 2-D array of distributions, got shape {p.shape}")
    return p


def predictive_entropy(probs, tol: float = 1e-6) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = _as_probs(probs)
    sums = p.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
    if bad.size:
        raise ContractError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1 within {tol}")
    if np.any(p < 0):
        raise ContractError("probabilities must be non-negative")
    logs = np.log(np.where(p > 0, p, 1.0))
    return -np.sum(p * logs, axis=1)


def entropy_cdf(entropies) -> tuple:
    """Empirical CDF: distinct sorted values and the fraction of entries ``<=`` each."""
    e = np.asarray(entropies, dtype=np.float64).ravel()
    if e.size == 0:
        raise ContractError("entropy_cdf needs at least one value")
    values, counts = np.unique(e, return_counts=True)
    return values, np.cumsum(counts) / e.size


def mmc(probs) -> float:
    """Mean over examples of the maximum predicted probability."""
    return float(np.mean(np.max(_as_probs(probs), axis=1)))


def auroc(scores_in, scores_out) -> float:
    """Mann-Whitney AUROC with in-distribution as the positive class; ties count half."""
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if s_in.size == 0 or s_out.size == 0:
        raise ContractError("auroc needs non-empty score sets on both sides")
    ranks = rankdata(np.concatenate([s_in, s_out]))  # midranks for ties
    n_in, n_out = s_in.size, s_out.size
    # doubled midranks are integers, so the U statistic is exact and the
    # result is the correctly rounded rational
    u2 = int(np.rint(2 * ranks[:n_in]).astype(np.int64).sum()) - n_in * (n_in + 1)
    return u2 / (2 * n_in * n_out)


@dataclass
class OodReport:
    mmc_in: float
    mmc_out: float
    auroc: float

    def to_dict(self) -> dict:
        return asdict(self)


def ood_report(probs_in, probs_out, score: str = "confidence") -> OodReport:
    """MMC on both sets and AUROC for separating them.

    ``score="confidence"`` ranks by max probability; ``"entropy"`` by negated entropy.
    """
    if score == "confidence":
        s_in, s_out = np.max(_as_probs(probs_in), axis=1), np.max(_as_probs(probs_out), axis=1)
    elif score == "entropy":
        s_in, s_out = -predictive_entropy(probs_in), -predictive_entropy(probs_out)
    else:
        raise ValueError(f"unknown score {score!r}")
    return OodReport(mmc(probs_in), mmc(probs_out), auroc(s_in, s_out))
