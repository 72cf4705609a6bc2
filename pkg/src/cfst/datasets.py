"""Logged bandit feedback containers and their on-disk text format."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GroundTruthTable:
    """Full counterfactual outcome table used only for evaluation.

    probs[i, a] = P(r=1 | x_i, a); labels[i, a] is one frozen draw (or the
    deterministic membership indicator for converted multi-label data).
    """

    probs: np.ndarray
    labels: np.ndarray


@dataclass
class BanditDataset:
    """Observational tuples (x_i, a_i, r_i) plus optional ground truth."""

    features: np.ndarray
    actions: np.ndarray
    outcomes: np.ndarray
    num_actions: int
    num_classes: int
    ground_truth: GroundTruthTable | None = None
    propensities: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.int64)
        n = len(self.features)
        if len(self.actions) != n or len(self.outcomes) != n:
            raise ValueError("features/actions/outcomes length mismatch")
        if n and (self.actions.min() < 0 or self.actions.max() >= self.num_actions):
            raise ValueError("action index out of range")
        if n and (self.outcomes.min() < 0 or self.outcomes.max() >= self.num_classes):
            raise ValueError("outcome class out of range")
        gt = self.ground_truth
        if gt is not None:
            idx = np.arange(n)
            if not np.array_equal(gt.labels[idx, self.actions], self.outcomes):
                raise ValueError("factual outcomes disagree with ground-truth table")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "BanditDataset":
        indices = np.asarray(indices)
        if indices.dtype != bool:
            indices = indices.astype(np.int64)
        gt = self.ground_truth
        return BanditDataset(
            features=self.features[indices],
            actions=self.actions[indices],
            outcomes=self.outcomes[indices],
            num_actions=self.num_actions,
            num_classes=self.num_classes,
            ground_truth=None if gt is None else GroundTruthTable(
                probs=gt.probs[indices], labels=gt.labels[indices]),
            propensities=None if self.propensities is None
            else self.propensities[indices],
        )


def onehot(indices, n: int) -> np.ndarray:
    indices = np.asarray(indices, dtype=np.int64)
    out = np.zeros((len(indices), n))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def joint_input(features: np.ndarray, actions, num_actions: int) -> np.ndarray:
    """Network input rows: features concatenated with a one-hot action."""
    features = np.asarray(features, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.int64)
    if actions.ndim == 0:
        actions = np.full(len(features), int(actions))
    return np.hstack([features, onehot(actions, num_actions)])


def all_action_inputs(features: np.ndarray, num_actions: int) -> np.ndarray:
    """Rows (i, a) in action-major-within-sample order: sample 0 under every
    action, then sample 1, ... Shape (N * num_actions, d + num_actions)."""
    n = len(features)
    feats = np.repeat(features, num_actions, axis=0)
    acts = np.tile(np.arange(num_actions), n)
    return joint_input(feats, acts, num_actions)


def split_bandit(data: BanditDataset, fraction: float,
                 rng: np.random.Generator) -> tuple[BanditDataset, BanditDataset]:
    """Random (1-fraction)/fraction split, e.g. for validation holdout."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    n = len(data)
    perm = rng.permutation(n)
    n_hold = max(1, int(round(fraction * n)))
    return data.subset(perm[n_hold:]), data.subset(perm[:n_hold])


_FLT = np.float64


def _fmt(v) -> str:
    return float(v).hex()


def _parse(tok: str) -> float:
    return float.fromhex(tok)


def save_bandit(data: BanditDataset, path) -> None:
    """Self-describing columnar text dump, exact round trip."""
    n, d = data.features.shape
    has_gt = data.ground_truth is not None
    has_prop = data.propensities is not None
    lines = [
        "bandit-dataset v1",
        f"n={n}",
        f"feature_dim={d}",
        f"num_actions={data.num_actions}",
        f"num_classes={data.num_classes}",
        f"ground_truth={int(has_gt)}",
        f"propensities={int(has_prop)}",
    ]
    for i in range(n):
        cols = [" ".join(_fmt(v) for v in data.features[i]),
                str(int(data.actions[i])),
                str(int(data.outcomes[i]))]
        if has_gt:
            cols.append(" ".join(_fmt(v) for v in data.ground_truth.probs[i]))
            cols.append(" ".join(str(int(v)) for v in data.ground_truth.labels[i]))
        if has_prop:
            cols.append(_fmt(data.propensities[i]))
        lines.append(" | ".join(cols))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_bandit(path) -> BanditDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "bandit-dataset v1":
        raise ValueError(f"{path}: not a v1 bandit dataset dump")
    hdr = dict(line.split("=", 1) for line in lines[1:7])
    n = int(hdr["n"])
    d = int(hdr["feature_dim"])
    num_actions = int(hdr["num_actions"])
    num_classes = int(hdr["num_classes"])
    has_gt = bool(int(hdr["ground_truth"]))
    has_prop = bool(int(hdr["propensities"]))

    features = np.zeros((n, d))
    actions = np.zeros(n, dtype=np.int64)
    outcomes = np.zeros(n, dtype=np.int64)
    probs = np.zeros((n, num_actions)) if has_gt else None
    labels = np.zeros((n, num_actions), dtype=np.int64) if has_gt else None
    prop = np.zeros(n) if has_prop else None
    for i, line in enumerate(lines[7:7 + n]):
        cols = line.split(" | ")
        features[i] = [_parse(t) for t in cols[0].split()]
        actions[i] = int(cols[1])
        outcomes[i] = int(cols[2])
        k = 3
        if has_gt:
            probs[i] = [_parse(t) for t in cols[k].split()]
            labels[i] = [int(t) for t in cols[k + 1].split()]
            k += 2
        if has_prop:
            prop[i] = _parse(cols[k])
    gt = GroundTruthTable(probs, labels) if has_gt else None
    return BanditDataset(features, actions, outcomes, num_actions,
                         num_classes, gt, prop)
