"""Warm-start models: direct method, HSIC-regularized, and inverse
propensity weighted training (uniform DM)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .datasets import BanditDataset, joint_input, onehot

log = logging.getLogger(__name__)

BACKBONE_KINDS = ("dm", "hsic", "udm")


@dataclass
class BackboneConfig:
    kind: str = "dm"
    hidden_dims: tuple[int, ...] = (128, 128)
    dropout_p: float = 0.2
    leaky_slope: float = 0.01
    epochs: int = 150
    batch_size: int = 128
    learning_rate: float = 1e-3
    hsic_lambda: float = 0.01
    rbf_sigma: float = 0.5
    embedding_layer: int = 1        # pre-activation of the second linear layer
    propensity_floor: float = 0.01
    optimizer: str = "adam"
    deterministic: bool = False

    def __post_init__(self):
        if self.kind not in BACKBONE_KINDS:
            raise ValueError(f"unknown backbone kind {self.kind!r}")
        if self.hsic_lambda < 0:
            raise ValueError("hsic_lambda must be nonnegative")
        if self.rbf_sigma <= 0:
            raise ValueError("rbf_sigma must be positive")


def build_model(data: BanditDataset, config: BackboneConfig,
                rng: np.random.Generator) -> nn.MlpModel:
    dims = [data.feature_dim + data.num_actions, *config.hidden_dims,
            data.num_classes]
    return nn.init_mlp(dims, rng, leaky_slope=config.leaky_slope,
                       dropout_p=config.dropout_p)


def _factual_training_arrays(data: BanditDataset):
    X = joint_input(data.features, data.actions, data.num_actions)
    T = onehot(data.outcomes, data.num_classes)
    return X, T


def train_dm(data: BanditDataset, config: BackboneConfig,
             rng: np.random.Generator, history: list | None = None) -> nn.MlpModel:
    """Factual cross-entropy only; ignores the logging bias entirely."""
    if len(data) == 0:
        raise ValueError("empty dataset")
    model = build_model(data, config, rng)
    X, T = _factual_training_arrays(data)
    return nn.train_classifier(
        model, X, T, rng, epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, optimizer=config.optimizer,
        deterministic=config.deterministic, history=history)


def rbf_kernel(u: np.ndarray, v: np.ndarray, sigma: float) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError("rbf_kernel arguments must have equal shape")
    d2 = float(((u - v) ** 2).sum())
    return float(np.exp(-d2 / (2.0 * sigma ** 2)))


def _rbf_gram(Z: np.ndarray, sigma: float) -> np.ndarray:
    sq = (Z ** 2).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (Z @ Z.T)
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma ** 2))


def hsic_n(action_onehots: np.ndarray, embeddings: np.ndarray,
           sigma: float) -> float:
    value, _ = hsic_n_grad(action_onehots, embeddings, sigma)
    return value


def hsic_n_grad(action_onehots: np.ndarray, embeddings: np.ndarray,
                sigma: float) -> tuple[float, np.ndarray]:
    """Three-term kernel dependence estimator and its embedding gradient.

    value = sum_ij K_ij L_ij / N^2 + (sum K)(sum L) / N^4
            - 2 sum_i (K 1)_i (L 1)_i / N^3
    with RBF kernels on both the one-hot actions and the embeddings.
    """
    A = np.asarray(action_onehots, dtype=np.float64)
    Z = np.asarray(embeddings, dtype=np.float64)
    n = len(A)
    if n < 2 or len(Z) != n:
        raise ValueError("need matched inputs with at least two rows")
    K = _rbf_gram(A, sigma)
    L = _rbf_gram(Z, sigma)
    kr = K.sum(axis=1)
    value = (K * L).sum() / n ** 2 + K.sum() * L.sum() / n ** 4 \
        - 2.0 * (kr * L.sum(axis=1)).sum() / n ** 3
    # dvalue/dL_ij, then chain through the RBF into Z
    C = K / n ** 2 + K.sum() / n ** 4 - 2.0 * kr[:, None] / n ** 3
    W = (C + C.T) * L
    grad = -(W.sum(axis=1)[:, None] * Z - W @ Z) / sigma ** 2
    return float(value), grad


def _normalize_rows(z: np.ndarray):
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    norms = np.maximum(norms, 1e-12)
    return z / norms, norms


def _hsic_hook(config: BackboneConfig, actions: np.ndarray, num_actions: int):
    layer = config.embedding_layer
    action_1h = onehot(actions, num_actions)

    def hook(model: nn.MlpModel, trace: nn.ForwardTrace, idx: np.ndarray):
        if layer >= len(trace.pre_acts):
            raise ValueError(
                f"embedding layer {layer} out of range for this network")
        z = trace.pre_acts[layer]
        # unit-normalize the embedding rows: a narrow kernel on raw wide
        # activations collapses to the identity and regularizes nothing
        zn, norms = _normalize_rows(z)
        value, dzn = hsic_n_grad(action_1h[idx], zn, config.rbf_sigma)
        dz = (dzn - zn * (dzn * zn).sum(axis=1, keepdims=True)) / norms
        dpre: list = [None] * len(trace.pre_acts)
        dpre[layer] = config.hsic_lambda * dz
        return config.hsic_lambda * value, dpre

    return hook


def train_hsic(data: BanditDataset, config: BackboneConfig,
               rng: np.random.Generator, history: list | None = None) -> nn.MlpModel:
    """Factual cross entropy plus an embedding/action dependence penalty,
    computed per minibatch."""
    if config.hsic_lambda > 0 and config.batch_size < 32:
        raise ValueError("HSIC training needs batch_size >= 32")
    model = build_model(data, config, rng)
    X, T = _factual_training_arrays(data)
    hook = None
    if config.hsic_lambda > 0:
        hook = _hsic_hook(config, data.actions, data.num_actions)
    return nn.train_classifier(
        model, X, T, rng, epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, optimizer=config.optimizer,
        deterministic=config.deterministic, batch_hook=hook, history=history)


@dataclass
class PropensityModel:
    """Multinomial linear estimate of the logging policy."""

    model: nn.MlpModel
    floor: float = 0.01

    def action_probs(self, features: np.ndarray) -> np.ndarray:
        probs, _ = nn.forward(self.model, features, mode="eval")
        return probs


def fit_propensity(data: BanditDataset, rng: np.random.Generator,
                   epochs: int = 60, learning_rate: float = 0.01,
                   batch_size: int = 256,
                   floor: float = 0.01) -> PropensityModel:
    # few epochs on purpose: an overfit logging-policy estimate produces
    # extreme importance weights that destabilize the downstream fit
    model = nn.init_mlp([data.feature_dim, data.num_actions], rng)
    nn.train_classifier(
        model, data.features, onehot(data.actions, data.num_actions), rng,
        epochs=epochs, batch_size=batch_size, learning_rate=learning_rate)
    return PropensityModel(model=model, floor=floor)


def propensity_weights(propensity: PropensityModel,
                       data: BanditDataset) -> tuple[np.ndarray, int]:
    """Inverse estimated propensity of each logged action, floored before
    division. Returns (weights, clamp count)."""
    pi = propensity.action_probs(data.features)
    chosen = pi[np.arange(len(data)), data.actions]
    n_clamped = int(np.count_nonzero(chosen < propensity.floor))
    weights = 1.0 / np.maximum(chosen, propensity.floor)
    if n_clamped:
        log.warning("propensity floor %g clamped %d of %d samples",
                    propensity.floor, n_clamped, len(data))
    return weights, n_clamped


def train_udm(data: BanditDataset, propensity: PropensityModel,
              config: BackboneConfig, rng: np.random.Generator,
              history: list | None = None) -> nn.MlpModel:
    """Propensity-weighted factual cross entropy (simulated uniform trial)."""
    weights, _ = propensity_weights(propensity, data)
    model = build_model(data, config, rng)
    X, T = _factual_training_arrays(data)
    return nn.train_classifier(
        model, X, T, rng, epochs=config.epochs, batch_size=config.batch_size,
        learning_rate=config.learning_rate, sample_weights=weights,
        optimizer=config.optimizer, deterministic=config.deterministic,
        history=history)
