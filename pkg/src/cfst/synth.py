"""Synthetic pricing simulators, logging policies and the two-moons toy.

Each generator returns a BanditDataset carrying the full counterfactual
ground-truth table, so downstream evaluation never has to estimate it.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datasets import BanditDataset, GroundTruthTable

log = logging.getLogger(__name__)

DEMAND_KINDS = ("D1", "D2", "D3", "D4", "D5")
NUM_PRICES = 5
FEATURE_DIM = 50
LOGIT_CAP = 10.0


@dataclass
class DemandSpec:
    """One pricing simulator instance; coefficients are frozen at creation."""

    kind: str
    coeff_a: np.ndarray
    coeff_b: np.ndarray
    coeff_c: np.ndarray
    feature_dim: int = FEATURE_DIM
    num_prices: int = NUM_PRICES


def make_demand_spec(kind: str, rng: np.random.Generator) -> DemandSpec:
    if kind not in DEMAND_KINDS:
        raise ValueError(f"unknown demand kind {kind!r}")
    return DemandSpec(
        kind=kind,
        coeff_a=rng.uniform(0.0, 1.0, FEATURE_DIM),
        coeff_b=rng.uniform(0.0, 1.0, FEATURE_DIM),
        coeff_c=rng.uniform(0.0, 1.0, FEATURE_DIM),
    )


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def h_value(x: np.ndarray, spec: DemandSpec) -> float:
    """Feature-dependent demand intercept sum(a) * exp(-sum_j b_j|x_j - c_j|).

    The negative exponent keeps the intercept on the same scale as the
    price terms; with a positive exponent the intercept dwarfs every price
    effect and all five simulators collapse to constant demand.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.feature_dim,):
        raise ValueError(f"expected {spec.feature_dim}-vector, got {x.shape}")
    expo = float(np.dot(spec.coeff_b, np.abs(x - spec.coeff_c)))
    return float(spec.coeff_a.sum() * np.exp(-expo))


def _h_values(X: np.ndarray, spec: DemandSpec) -> np.ndarray:
    expo = np.abs(X - spec.coeff_c) @ spec.coeff_b
    return spec.coeff_a.sum() * np.exp(-expo)


def stepwise1(x: float) -> float:
    if x <= 0.1:
        return 0.7
    if x <= 0.3:
        return 0.5
    if x <= 0.6:
        return 0.3
    return 0.1


def stepwise2(x: float, y: float) -> float:
    if x <= 0.1:
        return 0.65 if y > 0.5 else 0.45
    if x <= 0.3:
        return 0.55 if y > 0.5 else 0.35
    if x <= 0.6:
        return 0.45 if y > 0.5 else 0.25
    return 0.35 if y > 0.5 else 0.15


_stepwise1_v = np.vectorize(stepwise1, otypes=[np.float64])
_stepwise2_v = np.vectorize(stepwise2, otypes=[np.float64])


def _demand_terms(spec: DemandSpec, X: np.ndarray):
    """Per-sample intercept and price sensitivity: logit = base - slope * p."""
    X = np.asarray(X, dtype=np.float64)
    x0 = X[:, 0]
    if spec.kind == "D1":
        return _h_values(X, spec), 2.0 * x0
    if spec.kind == "D2":
        return 5.0 * (x0 - 0.5), np.full(len(X), 0.4)
    if spec.kind == "D3":
        return _h_values(X, spec), _stepwise1_v(x0)
    if spec.kind == "D4":
        return _h_values(X, spec), _stepwise2_v(x0, X[:, 1])
    if spec.kind == "D5":
        return _h_values(X, spec), x0 + X[:, 1]
    raise ValueError(f"unknown demand kind {spec.kind!r}")


def _demand_logits(spec: DemandSpec, X: np.ndarray) -> np.ndarray:
    """(N, num_prices) logits before the sigmoid, capped at +-LOGIT_CAP."""
    base, slope = _demand_terms(spec, X)
    prices = np.arange(1, spec.num_prices + 1, dtype=np.float64)
    logits = base[:, None] - slope[:, None] * prices[None, :]
    return np.clip(logits, -LOGIT_CAP, LOGIT_CAP)


def demand_prob(spec: DemandSpec, x: np.ndarray, price: float) -> float:
    """P(buy | x, price); prices are the integers 1..5, with price 0 allowed
    as a synthetic probe of the intercept."""
    if not 0 <= price <= spec.num_prices:
        raise ValueError(f"price must be in 0..{spec.num_prices}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.feature_dim,):
        raise ValueError(f"expected {spec.feature_dim}-vector, got {x.shape}")
    base, slope = _demand_terms(spec, x[None, :])
    logit = np.clip(base - slope * price, -LOGIT_CAP, LOGIT_CAP)
    return float(sigmoid(logit[0]))


def demand_prob_table(spec: DemandSpec, X: np.ndarray) -> np.ndarray:
    return sigmoid(_demand_logits(spec, X))


def logging_policy_proportional(x: np.ndarray, num_actions: int,
                                denom_coords: int | None = None) -> np.ndarray:
    """pi(i|x) proportional to x_i over the first num_actions coordinates.

    denom_coords normalizes by a wider coordinate range instead (the
    literal sub-stochastic variant); sampling renormalizes either way.
    """
    x = np.asarray(x, dtype=np.float64)
    head = x[:num_actions]
    if (head < 0).any():
        raise ValueError("proportional policy needs nonnegative coordinates")
    denom = x[:denom_coords].sum() if denom_coords else head.sum()
    if denom <= 0.0:
        log.warning("all-zero policy denominator; falling back to uniform")
        return np.full(num_actions, 1.0 / num_actions)
    return head / denom


def logging_policy_softmax(x: np.ndarray, num_actions: int, o: float) -> np.ndarray:
    """Softmax of o * x over the first num_actions coordinates; o controls
    how much the logging data overlaps across actions (o=0 is uniform)."""
    if o < 0:
        raise ValueError("overlap strength must be nonnegative")
    z = o * np.asarray(x, dtype=np.float64)[:num_actions]
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def proportional_policy(num_actions: int = NUM_PRICES,
                        denom_coords: int | None = None):
    def policy(X: np.ndarray) -> np.ndarray:
        return np.stack([
            logging_policy_proportional(row, num_actions, denom_coords)
            for row in np.asarray(X, dtype=np.float64)
        ])
    return policy


def softmax_overlap_policy(overlap: float, num_actions: int = NUM_PRICES):
    def policy(X: np.ndarray) -> np.ndarray:
        return np.stack([
            logging_policy_softmax(row, num_actions, overlap)
            for row in np.asarray(X, dtype=np.float64)
        ])
    return policy


def sample_bandit_dataset(spec: DemandSpec, n: int, policy,
                          rng: np.random.Generator) -> BanditDataset:
    """Draw n customers, their full outcome table, and one logged action each.

    policy maps a feature matrix to per-row action probabilities; rows that
    do not sum to 1 (fidelity variants) are renormalized for sampling but
    recorded verbatim as propensities.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    X = rng.uniform(0.0, 1.0, (n, spec.feature_dim))
    probs = demand_prob_table(spec, X)
    labels = (rng.random(probs.shape) < probs).astype(np.int64)

    pi = np.asarray(policy(X), dtype=np.float64)
    if pi.shape != (n, spec.num_prices):
        raise ValueError(f"policy returned shape {pi.shape}")
    sampling = pi / pi.sum(axis=1, keepdims=True)
    cdf = np.cumsum(sampling, axis=1)
    u = rng.random(n)
    actions = (u[:, None] > cdf).sum(axis=1)

    idx = np.arange(n)
    return BanditDataset(
        features=X,
        actions=actions,
        outcomes=labels[idx, actions],
        num_actions=spec.num_prices,
        num_classes=2,
        ground_truth=GroundTruthTable(probs=probs, labels=labels),
        propensities=pi[idx, actions],
    )


def two_moons(n: int, noise: float, rng: np.random.Generator):
    """Two interleaved unit half-circles, the second one mirrored and offset
    by (1, -0.5) in the usual parameterization. Points are evenly spaced
    along each arc (the standard construction) plus Gaussian noise.
    Returns (points, types)."""
    if n <= 0:
        raise ValueError("n must be positive")
    n0 = (n + 1) // 2
    n1 = n - n0
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, max(n1, 1))[:n1]
    m0 = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    m1 = np.stack([1.0 - np.cos(t1), 1.0 - np.sin(t1) - 0.5], axis=1)
    pts = np.vstack([m0, m1])
    if noise > 0.0:
        pts = pts + rng.normal(0.0, noise, pts.shape)
    types = np.concatenate([np.zeros(n0, dtype=np.int64),
                            np.ones(n1, dtype=np.int64)])
    return pts, types


def toy_bandit(points: np.ndarray, types: np.ndarray,
               rng: np.random.Generator) -> BanditDataset:
    """Two-action bandit on the moons: type-k customers buy under action k
    only. The logger prefers action 1 on the left, with probability
    exp(-(x0 - min x0)), so the right side rarely sees action 1."""
    points = np.asarray(points, dtype=np.float64)
    types = np.asarray(types, dtype=np.int64)
    n = len(points)
    labels = np.zeros((n, 2), dtype=np.int64)
    labels[np.arange(n), types] = 1

    p_a1 = np.exp(-(points[:, 0] - points[:, 0].min()))
    actions = (rng.random(n) < p_a1).astype(np.int64)
    prop = np.where(actions == 1, p_a1, 1.0 - p_a1)
    return BanditDataset(
        features=points,
        actions=actions,
        outcomes=labels[np.arange(n), actions],
        num_actions=2,
        num_classes=2,
        ground_truth=GroundTruthTable(probs=labels.astype(np.float64),
                                      labels=labels),
        propensities=prop,
    )
