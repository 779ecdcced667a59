"""Compound density networks: input-conditioned matrix-normal weight mixtures."""

from .model import Architecture, CompoundDensityNetwork
from .training import TrainConfig, train

__all__ = ["Architecture", "CompoundDensityNetwork", "TrainConfig", "train"]
__version__ = "0.1.0"
