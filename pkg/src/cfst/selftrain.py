"""Counterfactual self-training: pseudolabel imputation over every unseen
action, an adversarial input-consistency penalty on the joint
feature-action space, and the alternating training loop around them."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .datasets import BanditDataset, all_action_inputs, joint_input, onehot

log = logging.getLogger(__name__)


@dataclass
class CstConfig:
    outer_iterations: int = 2
    inner_epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 1e-3
    reimpute_every: int = 1         # epochs between re-imputations
    lambda_cvat: float = 0.0        # 0 disables the consistency term
    cvat_xi: float = 10.0           # finite-difference step of power iteration
    cvat_power_iters: int = 3
    cvat_epsilon: float = 1.0       # L2 radius of the final perturbation
    optimizer: str = "adam"
    full_batch: bool = False
    deterministic: bool = False     # no dropout while training
    frozen_imputer: bool = False    # impute from the iteration-start model
    reinit_inner: bool = False      # retrain a fresh model each round instead
                                    # of continuing from the current one

    def __post_init__(self):
        if self.outer_iterations < 0 or self.inner_epochs <= 0:
            raise ValueError("iteration counts must be positive")
        if self.reimpute_every <= 0:
            raise ValueError("reimpute_every must be positive")
        if min(self.cvat_xi, self.cvat_epsilon) <= 0 or self.cvat_power_iters <= 0:
            raise ValueError("perturbation constants must be positive")
        if self.lambda_cvat < 0:
            raise ValueError("lambda_cvat must be nonnegative")


@dataclass
class PseudolabelTable:
    """One-hot outcomes for every (sample, action) cell. Cells where the
    action was actually logged hold the observation and are never
    overwritten by imputation."""

    labels: np.ndarray              # (N, A, m)
    factual_mask: np.ndarray        # (N, A) bool


def _all_probs(model: nn.MlpModel, data: BanditDataset) -> np.ndarray:
    """Eval-mode class probabilities for every (sample, action) pair."""
    rows = all_action_inputs(data.features, data.num_actions)
    probs, _ = nn.forward(model, rows, mode="eval")
    return probs.reshape(len(data), data.num_actions, model.num_classes)


def _table_from_probs(probs: np.ndarray, data: BanditDataset) -> PseudolabelTable:
    n, a, m = probs.shape
    labels = np.zeros((n, a, m))
    best = probs.argmax(axis=2)     # ties resolve to the lowest class index
    ii, aa = np.meshgrid(np.arange(n), np.arange(a), indexing="ij")
    labels[ii, aa, best] = 1.0
    mask = np.zeros((n, a), dtype=bool)
    idx = np.arange(n)
    mask[idx, data.actions] = True
    labels[idx, data.actions] = onehot(data.outcomes, m)
    return PseudolabelTable(labels=labels, factual_mask=mask)


def impute_pseudolabels(model: nn.MlpModel, data: BanditDataset) -> PseudolabelTable:
    """Argmax one-hot labels for all counterfactual cells of the dataset."""
    return _table_from_probs(_all_probs(model, data), data)


def table_loss(table: PseudolabelTable, probs: np.ndarray) -> float:
    """Eq.-style total cross entropy of a probability tensor against the
    table, summed over every (sample, action) cell."""
    logp = np.log(np.maximum(probs, nn.PROB_FLOOR))
    return float(-(table.labels * logp).sum())


def cst_loss(
    model: nn.MlpModel,
    data: BanditDataset,
    table: PseudolabelTable,
    rng: np.random.Generator | None = None,
    mode: str = "eval",
    indices: np.ndarray | None = None,
    return_input_grads: bool = False,
):
    """Self-training loss: factual cross entropy plus cross entropy against
    the imputed counterfactual cells, summed over the given samples.
    Gradients are with respect to the parameters (and optionally the
    stacked (sample, action) input rows)."""
    if indices is None:
        indices = np.arange(len(data))
    indices = np.asarray(indices)
    a, m = data.num_actions, model.num_classes
    rows = all_action_inputs(data.features[indices], a)
    targets = table.labels[indices].reshape(len(indices) * a, m)
    probs, trace = nn.forward(model, rows, mode=mode, rng=rng)
    nn._record_floor_events(
        np.count_nonzero((probs < nn.PROB_FLOOR) & (targets > 0)))
    logp = np.log(np.maximum(probs, nn.PROB_FLOOR))
    loss = float(-(targets * logp).sum())
    dlogits = probs - targets
    grads, input_grads = nn.backward(model, trace, dlogits)
    if return_input_grads:
        return loss, grads, input_grads
    return loss, grads


def _counterfactual_rows(data: BanditDataset, indices: np.ndarray):
    """Per selected sample, its num_actions-1 unlogged actions in ascending
    order; rows are sample-major. Returns (features_rep, actions, k)."""
    feats = data.features[indices]
    logged = data.actions[indices]
    b = len(indices)
    a = data.num_actions
    grid = np.tile(np.arange(a), (b, 1))
    keep = grid != logged[:, None]
    cf_actions = grid[keep].reshape(b, a - 1)
    feats_rep = np.repeat(feats, a - 1, axis=0)
    return feats_rep, cf_actions.ravel(), a - 1


def _cvat_layout(model, data, indices):
    """Counterfactual rows and the frozen reference distribution."""
    feats_rep, cf_actions, k = _counterfactual_rows(data, indices)
    rows = joint_input(feats_rep, cf_actions, data.num_actions)
    ref, _ = nn.forward(model, rows, mode="eval")
    return feats_rep, k, rows, ref


def _power_iteration(model, config, rng, feats_rep, k, rows, ref, b, dim):
    """Dominant-curvature direction of the summed divergence, one unit
    vector per sample, estimated by repeated normalized input gradients at
    probe step xi. rows[:, :dim] is used as scratch space."""
    d = rng.standard_normal((b, dim))
    norms = np.linalg.norm(d, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    d = d / norms
    for _ in range(config.cvat_power_iters):
        rows[:, :dim] = feats_rep + config.cvat_xi * np.repeat(d, k, axis=0)
        q, trace = nn.forward(model, rows, mode="eval")
        _, input_grads = nn.backward(model, trace, q - ref)
        g = input_grads[:, :dim].reshape(b, k, dim).sum(axis=1)
        norms = np.linalg.norm(g, axis=1)
        flat = norms == 0.0
        if flat.any():
            log.debug("flat divergence for %d samples; keeping direction",
                      int(flat.sum()))
            g[flat] = d[flat]
            norms[flat] = 1.0
        d = g / norms[:, None]
    return d


def cvat_perturbation(
    model: nn.MlpModel,
    data: BanditDataset,
    config: CstConfig,
    rng: np.random.Generator,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Adversarial feature perturbation per sample, shared across that
    sample's counterfactual actions: epsilon times the dominant-curvature
    unit direction of sum_a KL(f(x, a) || f(x + xi d, a)). All forwards are
    eval mode so the divergence is exactly zero at d = 0."""
    if indices is None:
        indices = np.arange(len(data))
    indices = np.asarray(indices)
    if data.num_actions < 2:
        return np.zeros((len(indices), data.feature_dim))
    feats_rep, k, rows, ref = _cvat_layout(model, data, indices)
    d = _power_iteration(model, config, rng, feats_rep, k, rows, ref,
                         len(indices), data.feature_dim)
    return config.cvat_epsilon * d


def _cvat_terms(model, data, config, rng, indices, perturbations,
                return_input_grads=False):
    """Consistency loss and gradients; builds the counterfactual layout
    once and runs the power iteration in place when no perturbation is
    supplied."""
    feats_rep, k, rows, ref = _cvat_layout(model, data, indices)
    b, dim = len(indices), data.feature_dim
    if perturbations is None:
        d = _power_iteration(model, config, rng, feats_rep, k, rows, ref,
                             b, dim)
        perturbations = config.cvat_epsilon * d

    rows[:, :dim] = feats_rep + np.repeat(perturbations, k, axis=0)
    q, trace = nn.forward(model, rows, mode="eval")
    nn._record_floor_events(np.count_nonzero((q < nn.PROB_FLOOR) & (ref > 0)))
    logq = np.log(np.maximum(q, nn.PROB_FLOOR))
    logref = np.where(ref > 0, np.log(np.maximum(ref, nn.PROB_FLOOR)), 0.0)
    loss = float((ref * logref - ref * logq).sum())
    grads, input_grads = nn.backward(model, trace, q - ref)
    if return_input_grads:
        return loss, grads, input_grads
    return loss, grads


def cvat_loss(
    model: nn.MlpModel,
    data: BanditDataset,
    config: CstConfig,
    rng: np.random.Generator | None = None,
    indices: np.ndarray | None = None,
    perturbations: np.ndarray | None = None,
    return_input_grads: bool = False,
):
    """Consistency penalty sum_i sum_{a != a_i} KL(ref || perturbed).

    The reference distribution is the model's own unperturbed eval-mode
    output, treated as a constant: gradients flow only through the
    perturbed forward pass. Computes the adversarial perturbation itself
    unless one is supplied.
    """
    if indices is None:
        indices = np.arange(len(data))
    indices = np.asarray(indices)
    zeros = [np.zeros_like(p) for p in model.params()]
    if data.num_actions < 2:
        return (0.0, zeros, np.zeros((0, model.input_dim))) \
            if return_input_grads else (0.0, zeros)
    return _cvat_terms(model, data, config, rng, indices, perturbations,
                       return_input_grads)


class _GdState:
    def __init__(self, lr):
        self.lr = lr


def cst_train(
    model: nn.MlpModel,
    data: BanditDataset,
    config: CstConfig,
    rng: np.random.Generator,
    snapshot_hook=None,
):
    """Alternate pseudolabel imputation and model retraining.

    Returns (trained model copy, history). History rows are dicts: 'impute'
    events carry the total self-training loss under the old and new tables
    at the current parameters plus the count of changed cells; 'epoch'
    events carry the full-data loss after the epoch's updates.
    """
    model = model.copy()
    if config.outer_iterations == 0:
        return model, []
    params = model.params()
    n = len(data)
    batch = n if config.full_batch else min(config.batch_size, n)
    mode = "eval" if config.deterministic or model.dropout_p == 0.0 else "train"
    use_cvat = config.lambda_cvat > 0 and data.num_actions > 1

    history: list[dict] = []
    table = None

    def reimpute(outer: int, epoch: int, probs: np.ndarray | None = None):
        nonlocal table
        imputer = model  # EM reading: impute from the current parameters
        if config.frozen_imputer:
            imputer = iter_start
        if probs is None:
            probs = _all_probs(model, data)
        new_table = _table_from_probs(
            probs if imputer is model else _all_probs(imputer, data), data)
        row = {"event": "impute", "outer": outer, "epoch": epoch,
               "cvat_loss": None, "changes": None, "loss_before": None}
        if table is not None:
            row["loss_before"] = table_loss(table, probs)
            row["changes"] = int(
                (new_table.labels != table.labels).any(axis=2).sum())
        row["cst_loss"] = table_loss(new_table, probs)
        history.append(row)
        table = new_table

    for outer in range(1, config.outer_iterations + 1):
        # each retraining round is a fresh optimization
        state = nn.init_adam(params, config.learning_rate) \
            if config.optimizer == "adam" else _GdState(config.learning_rate)
        iter_start = model.copy() if config.frozen_imputer else model
        reimpute(outer, -1)
        if config.reinit_inner:
            # classical self-training: the previous round only supplies the
            # pseudolabels, the classifier itself restarts from scratch
            fresh = nn.init_mlp(model.layer_dims, rng, model.leaky_slope,
                                model.dropout_p)
            for p, q in zip(params, fresh.params()):
                p[:] = q
        for epoch in range(config.inner_epochs):
            order = rng.permutation(n) if batch < n else np.arange(n)
            cvat_sum = 0.0
            for start in range(0, n, batch):
                idx = order[start:start + batch]
                scale = 1.0 / len(idx)
                loss, grads = cst_loss(model, data, table, rng,
                                       mode=mode, indices=idx)
                if use_cvat:
                    closs, cgrads = cvat_loss(model, data, config, rng,
                                              indices=idx)
                    cvat_sum += closs
                    for g, cg in zip(grads, cgrads):
                        g += config.lambda_cvat * cg
                    loss += config.lambda_cvat * closs
                if not np.isfinite(loss):
                    raise nn.DivergenceError(
                        f"self-training loss became {loss} (outer {outer}, "
                        f"epoch {epoch}); try a smaller learning rate")
                scaled = [g * scale for g in grads]
                if config.optimizer == "adam":
                    nn.adam_step(params, scaled, state)
                else:
                    nn.sgd_step(params, scaled, state.lr)
            last = epoch + 1 == config.inner_epochs
            will_reimpute = not last and (epoch + 1) % config.reimpute_every == 0
            probs_now = _all_probs(model, data)
            history.append({
                "event": "epoch", "outer": outer, "epoch": epoch,
                "cst_loss": table_loss(table, probs_now),
                "cvat_loss": cvat_sum, "changes": None, "loss_before": None,
            })
            if will_reimpute:
                reimpute(outer, epoch, probs_now)
        if snapshot_hook is not None:
            snapshot_hook(outer, model.copy())
    return model, history


def select_lambda(
    backbone: nn.MlpModel,
    train_data: BanditDataset,
    validation: BanditDataset,
    grid,
    config: CstConfig,
    rng: np.random.Generator,
) -> float:
    """Train one run per candidate weight and keep the one with the best
    factual log loss on held-out logged data; ties go to the smaller value."""
    from .metrics import factual_nll

    grid = sorted(grid)
    streams = rng.spawn(len(grid))
    best_lam, best_score = None, None
    for lam, stream in zip(grid, streams):
        cand_cfg = replace(config, lambda_cvat=float(lam))
        trained, _ = cst_train(backbone, train_data, cand_cfg, stream)
        score = factual_nll(trained, validation)
        log.info("lambda=%g validation factual NLL %.6f", lam, score)
        if best_score is None or score < best_score:
            best_lam, best_score = float(lam), score
    return best_lam
