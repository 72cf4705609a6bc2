"""Multi-label text datasets and their conversion to logged bandit feedback.

A learned logging policy picks one label per sample as the action; the
reward is whether that label is actually positive. Because label sets are
known, the converted dataset carries a deterministic counterfactual table.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import nn
from .datasets import BanditDataset, GroundTruthTable

log = logging.getLogger(__name__)


@dataclass
class MultiLabelDataset:
    features: np.ndarray            # dense N x d
    label_sets: list[frozenset[int]]
    num_labels: int

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def parse_libsvm_multilabel(text: str, num_features: int | None = None,
                            num_labels: int | None = None) -> MultiLabelDataset:
    """Parse 'l1,l2 idx:val idx:val ...' lines into a dense dataset.

    Feature indices are 1-based per repository convention unless an index 0
    appears anywhere; label indices are handled the same way. Pass
    num_features/num_labels to keep train and test files aligned.
    """
    raw_labels: list[list[int]] = []
    raw_feats: list[list[tuple[int, float]]] = []
    max_feat = -1
    min_feat = np.inf
    max_label = -1
    min_label = np.inf
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        tokens = stripped.split()
        if ":" in tokens[0]:
            labels, feat_tokens = [], tokens
        else:
            try:
                labels = [int(t) for t in tokens[0].split(",") if t]
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad label field {tokens[0]!r}") from exc
            feat_tokens = tokens[1:]
        pairs = []
        for tok in feat_tokens:
            idx, _, val = tok.partition(":")
            try:
                idx = int(idx)
                val = float(val)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad feature token {tok!r}") from exc
            pairs.append((idx, val))
            max_feat = max(max_feat, idx)
            min_feat = min(min_feat, idx)
        for l in labels:
            max_label = max(max_label, l)
            min_label = min(min_label, l)
        raw_labels.append(labels)
        raw_feats.append(pairs)
    if not raw_feats:
        raise ValueError("empty dataset")

    feat_base = 0 if min_feat == 0 else 1
    label_base = 0 if min_label == 0 else 1
    d = num_features if num_features is not None else max_feat - feat_base + 1
    n_labels = num_labels if num_labels is not None else (
        max_label - label_base + 1 if max_label >= 0 else 0)

    features = np.zeros((len(raw_feats), d))
    label_sets = []
    for i, (labels, pairs) in enumerate(zip(raw_labels, raw_feats)):
        for idx, val in pairs:
            j = idx - feat_base
            if not 0 <= j < d:
                raise ValueError(f"line {i + 1}: feature index {idx} out of range")
            features[i, j] = val
        lset = frozenset(l - label_base for l in labels)
        if lset and (min(lset) < 0 or max(lset) >= n_labels):
            raise ValueError(f"line {i + 1}: label out of range")
        label_sets.append(lset)
    log.info("parsed %d samples, %d features, %d labels",
             len(label_sets), d, n_labels)
    return MultiLabelDataset(features, label_sets, n_labels)


def dump_libsvm_multilabel(data: MultiLabelDataset) -> str:
    """Inverse of the parser (1-based indices, exact float round trip)."""
    lines = []
    for i in range(len(data)):
        parts = []
        labels = sorted(data.label_sets[i])
        if labels:
            parts.append(",".join(str(l + 1) for l in labels))
        row = data.features[i]
        for j in np.nonzero(row)[0]:
            parts.append(f"{j + 1}:{float(row[j])!r}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + "\n"


@dataclass
class LoggingPolicyModel:
    """Multinomial linear policy over features; temperature reshapes it."""

    model: nn.MlpModel
    temperature: float = 1.0
    subsample_indices: np.ndarray | None = None

    def action_probs(self, X: np.ndarray) -> np.ndarray:
        probs, trace = nn.forward(self.model, X, mode="eval")
        if self.temperature == 1.0:
            return probs
        return nn.softmax(trace.logits / self.temperature)


def fit_logging_policy(data: MultiLabelDataset, fraction: float,
                       rng: np.random.Generator, temperature: float = 1.0,
                       epochs: int = 200, learning_rate: float = 0.05,
                       batch_size: int = 64) -> LoggingPolicyModel:
    """Train the logging policy on a small fraction of the data.

    Each subsampled row contributes one uniformly drawn positive label as
    the supervised target; rows without positive labels are dropped.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(data)
    n_sub = max(1, int(round(fraction * n)))
    subsample = rng.choice(n, size=n_sub, replace=False)
    rows, targets = [], []
    for i in subsample:
        labels = sorted(data.label_sets[i])
        if not labels:
            continue
        rows.append(i)
        targets.append(labels[int(rng.integers(len(labels)))])
    if len(rows) < data.num_labels:
        log.warning("logging-policy subsample has %d usable rows for %d "
                    "labels; training anyway", len(rows), data.num_labels)
    if not rows:
        raise ValueError("no positively labeled rows in the policy subsample")
    model = nn.init_mlp([data.feature_dim, data.num_labels], rng)
    nn.train_classifier(
        model, data.features[rows],
        targets_onehot(np.array(targets), data.num_labels),
        rng, epochs=epochs, batch_size=batch_size,
        learning_rate=learning_rate)
    return LoggingPolicyModel(model=model, temperature=temperature,
                              subsample_indices=np.array(rows, dtype=np.int64))


def targets_onehot(indices: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(indices), n))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def convert_to_bandit(data: MultiLabelDataset, policy: LoggingPolicyModel,
                      rng: np.random.Generator) -> BanditDataset:
    """Sample one action per row from the policy; reward is membership of
    the action in the row's label set. The counterfactual table is the
    full membership indicator, so evaluation needs no estimation."""
    n = len(data)
    pi = policy.action_probs(data.features)
    cdf = np.cumsum(pi, axis=1)
    actions = (rng.random(n)[:, None] > cdf).sum(axis=1)
    labels = np.zeros((n, data.num_labels), dtype=np.int64)
    for i, lset in enumerate(data.label_sets):
        for l in lset:
            labels[i, l] = 1
    idx = np.arange(n)
    return BanditDataset(
        features=data.features,
        actions=actions,
        outcomes=labels[idx, actions],
        num_actions=data.num_labels,
        num_classes=2,
        ground_truth=GroundTruthTable(probs=labels.astype(np.float64),
                                      labels=labels),
        propensities=pi[idx, actions],
    )
