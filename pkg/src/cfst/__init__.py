"""Counterfactual classification from logged bandit feedback.

Trains a classifier over the joint feature-action space by iteratively
imputing pseudolabels for every action that was never logged, optionally
smoothed by an adversarial input-consistency penalty, and compares the
result against direct, kernel-debiased, and inverse-propensity-weighted
baselines on synthetic pricing simulators and converted multi-label data.
"""

from .datasets import BanditDataset, GroundTruthTable
from .nn import DivergenceError, MlpModel, make_rng
from .selftrain import CstConfig, PseudolabelTable, cst_train, impute_pseudolabels

__version__ = "0.1.0"

__all__ = [
    "BanditDataset",
    "CstConfig",
    "DivergenceError",
    "GroundTruthTable",
    "MlpModel",
    "PseudolabelTable",
    "cst_train",
    "impute_pseudolabels",
    "make_rng",
    "__version__",
]
