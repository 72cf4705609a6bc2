"""Counterfactual evaluation against full ground-truth tables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from .datasets import BanditDataset, GroundTruthTable, all_action_inputs, joint_input

METRIC_NAMES = ("nll", "hamming", "best_action_acc")


def _cell_probs(model: nn.MlpModel, features: np.ndarray,
                num_actions: int) -> np.ndarray:
    rows = all_action_inputs(np.asarray(features, dtype=np.float64), num_actions)
    probs, _ = nn.forward(model, rows, mode="eval")
    return probs.reshape(len(features), num_actions, model.num_classes)


def full_nll(model: nn.MlpModel, features: np.ndarray,
             ground_truth: GroundTruthTable) -> float:
    """Mean negative log likelihood of the frozen outcome draws over every
    (sample, action) cell, normalized by N * num_actions."""
    labels = np.asarray(ground_truth.labels, dtype=np.int64)
    n, a = labels.shape
    probs = _cell_probs(model, features, a)
    picked = np.take_along_axis(probs, labels[:, :, None], axis=2)[:, :, 0]
    nn._record_floor_events(np.count_nonzero(picked < nn.PROB_FLOOR))
    return float(-np.log(np.maximum(picked, nn.PROB_FLOOR)).sum() / (n * a))


def hamming_loss(model: nn.MlpModel, features: np.ndarray,
                 ground_truth: GroundTruthTable) -> float:
    """Fraction of cells where the argmax prediction differs from the
    ground-truth label (mismatch convention)."""
    labels = np.asarray(ground_truth.labels, dtype=np.int64)
    n, a = labels.shape
    pred = _cell_probs(model, features, a).argmax(axis=2)
    return float((pred != labels).mean())


def best_action_accuracy(model: nn.MlpModel, features: np.ndarray,
                         ground_truth_probs: np.ndarray) -> float:
    """How often the model's most-promising action (highest predicted
    probability of outcome class 1) is truly optimal; ties in the true
    table count any tied action as correct."""
    truth = np.asarray(ground_truth_probs, dtype=np.float64)
    n, a = truth.shape
    p_pos = _cell_probs(model, features, a)[:, :, 1]
    chosen = p_pos.argmax(axis=1)
    row_best = truth.max(axis=1)
    return float((truth[np.arange(n), chosen] == row_best).mean())


def factual_nll(model: nn.MlpModel, data: BanditDataset) -> float:
    """Log loss on the logged (x, a, r) triples only; used for validation
    scoring where no counterfactual table may be consulted."""
    rows = joint_input(data.features, data.actions, data.num_actions)
    probs, _ = nn.forward(model, rows, mode="eval")
    picked = probs[np.arange(len(data)), data.outcomes]
    nn._record_floor_events(np.count_nonzero(picked < nn.PROB_FLOOR))
    return float(-np.log(np.maximum(picked, nn.PROB_FLOOR)).mean())


def evaluate_model(model: nn.MlpModel, features: np.ndarray,
                   ground_truth: GroundTruthTable) -> dict[str, float]:
    return {
        "nll": full_nll(model, features, ground_truth),
        "hamming": hamming_loss(model, features, ground_truth),
        "best_action_acc": best_action_accuracy(model, features,
                                                ground_truth.probs),
    }


@dataclass
class MetricsReport:
    dataset: str
    backbone: str
    method: str
    config_hash: str
    seeds: list[int]
    per_seed: list[dict[str, float]]
    mean: dict[str, float] = field(default_factory=dict)
    stderr: dict[str, float] = field(default_factory=dict)


def aggregate(per_seed: list[dict[str, float]], *, dataset: str, backbone: str,
              method: str, config_hash: str, seeds: list[int]) -> MetricsReport:
    """Cross-seed mean and standard error (sample std / sqrt(k))."""
    if not per_seed:
        raise ValueError("need at least one run")
    report = MetricsReport(dataset=dataset, backbone=backbone, method=method,
                           config_hash=config_hash, seeds=list(seeds),
                           per_seed=list(per_seed))
    for name in per_seed[0]:
        vals = np.array([run[name] for run in per_seed], dtype=np.float64)
        report.mean[name] = float(vals.mean())
        report.stderr[name] = 0.0 if len(vals) < 2 else float(
            vals.std(ddof=1) / np.sqrt(len(vals)))
    return report


def report_rows(report: MetricsReport) -> list[dict]:
    """One CSV row per metric."""
    rows = []
    for name in sorted(report.mean):
        rows.append({
            "dataset": report.dataset,
            "backbone": report.backbone,
            "method": report.method,
            "metric": name,
            "mean": report.mean[name],
            "stderr": report.stderr[name],
            "seeds": len(report.seeds),
            "config_hash": report.config_hash,
        })
    return rows
