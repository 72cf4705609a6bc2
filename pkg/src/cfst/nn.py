"""Minimal dense network engine: MLP forward/backward, losses, Adam.

Everything is float64 numpy. Models are plain dataclasses holding weight
matrices; gradients are computed by hand-rolled reverse mode against a
ForwardTrace, including gradients with respect to the inputs (needed for
adversarial input perturbations downstream).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12

# Numeric-floor events: count of times a probability had to be clamped to
# PROB_FLOOR under a log. Exposed so tests and the harness can report them.
_floor_events = 0


def numeric_floor_events() -> int:
    return _floor_events


def reset_numeric_floor_events() -> None:
    global _floor_events
    _floor_events = 0


def _record_floor_events(n: int) -> None:
    global _floor_events
    if n:
        _floor_events += int(n)
        log.debug("probability floored at %g in %d entries", PROB_FLOOR, n)


def make_rng(seed) -> np.random.Generator:
    """Seeded generator; identical seed gives an identical stream."""
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent, reproducible substreams (for parallel seeded runs)."""
    return rng.spawn(n)


@dataclass
class MlpModel:
    """Feed-forward classifier over a joint feature-action input.

    layer_dims is [input, hidden..., num_classes]; weights[l] has shape
    (layer_dims[l], layer_dims[l+1]). Hidden layers use LeakyReLU followed
    by inverted dropout at train time.
    """

    layer_dims: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    leaky_slope: float = 0.01
    dropout_p: float = 0.0

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(
            layer_dims=list(self.layer_dims),
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            leaky_slope=self.leaky_slope,
            dropout_p=self.dropout_p,
        )


def init_mlp(
    layer_dims,
    rng: np.random.Generator,
    leaky_slope: float = 0.01,
    dropout_p: float = 0.0,
) -> MlpModel:
    """He-style init, biases zero."""
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2:
        raise ValueError("need at least input and output dims")
    if not 0.0 <= dropout_p < 1.0:
        raise ValueError(f"dropout_p must be in [0, 1), got {dropout_p}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, weights, biases, leaky_slope, dropout_p)


@dataclass
class ForwardTrace:
    """Everything backward() needs from one forward pass."""

    inputs: np.ndarray
    pre_acts: list[np.ndarray]      # hidden pre-activations z_l
    hidden: list[np.ndarray]        # post-activation, post-dropout h_l
    masks: list                     # inverted-dropout scale factors;
                                    # None = identity (eval mode)
    logits: np.ndarray
    probs: np.ndarray
    mode: str


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(
    model: MlpModel,
    inputs: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, ForwardTrace]:
    """Batch forward pass; rows of the result are softmax distributions."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != model.input_dim:
        raise ValueError(
            f"input shape {inputs.shape} incompatible with model input dim "
            f"{model.input_dim}"
        )
    drop = mode == "train" and model.dropout_p > 0.0
    if drop and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")

    h = inputs
    pre_acts, hidden, masks = [], [], []
    n_hidden = len(model.weights) - 1
    for l in range(n_hidden):
        z = h @ model.weights[l] + model.biases[l]
        a = np.where(z >= 0.0, z, model.leaky_slope * z)
        mask = None
        if drop:
            keep = rng.random(a.shape) >= model.dropout_p
            mask = keep / (1.0 - model.dropout_p)
            a = a * mask
        pre_acts.append(z)
        hidden.append(a)
        masks.append(mask)
        h = a
    logits = h @ model.weights[-1] + model.biases[-1]
    probs = softmax(logits)
    trace = ForwardTrace(inputs, pre_acts, hidden, masks, logits, probs, mode)
    return probs, trace


def backward(
    model: MlpModel,
    trace: ForwardTrace,
    dloss_dlogits: np.ndarray,
    dloss_dpre: list[np.ndarray | None] | None = None,
) -> tuple[list[np.ndarray], np.ndarray]:
    """Reverse pass from logit gradients.

    dloss_dpre optionally injects extra gradient at hidden pre-activations
    (slot l matches trace.pre_acts[l]); used by embedding regularizers.
    Returns (param_grads aligned with model.params(), input_grads).
    """
    dloss_dlogits = np.asarray(dloss_dlogits, dtype=np.float64)
    if dloss_dlogits.shape != trace.logits.shape:
        raise ValueError(
            f"logit-grad shape {dloss_dlogits.shape} does not match trace "
            f"{trace.logits.shape}; stale trace?"
        )
    n_hidden = len(model.weights) - 1
    w_grads: list[np.ndarray] = [None] * len(model.weights)
    b_grads: list[np.ndarray] = [None] * len(model.biases)

    below = trace.hidden[-1] if n_hidden else trace.inputs
    w_grads[-1] = below.T @ dloss_dlogits
    b_grads[-1] = dloss_dlogits.sum(axis=0)
    dh = dloss_dlogits @ model.weights[-1].T

    for l in range(n_hidden - 1, -1, -1):
        z = trace.pre_acts[l]
        if trace.masks[l] is not None:
            dh = dh * trace.masks[l]
        dz = dh * np.where(z >= 0.0, 1.0, model.leaky_slope)
        if dloss_dpre is not None and dloss_dpre[l] is not None:
            dz = dz + dloss_dpre[l]
        below = trace.hidden[l - 1] if l else trace.inputs
        w_grads[l] = below.T @ dz
        b_grads[l] = dz.sum(axis=0)
        dh = dz @ model.weights[l].T

    grads = []
    for gw, gb in zip(w_grads, b_grads):
        grads.append(gw)
        grads.append(gb)
    return grads, dh


def cross_entropy(
    probs: np.ndarray,
    targets: np.ndarray,
    sample_weights: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Weighted cross entropy, mean over the batch.

    loss = (1/B) sum_i w_i sum_k -t_ik log p_ik, gradient taken with
    respect to the logits that produced probs: w_i (p_i - t_i) / B.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if probs.shape != targets.shape:
        raise ValueError(f"shape mismatch {probs.shape} vs {targets.shape}")
    n = probs.shape[0]
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=np.float64)
        if w.shape != (n,):
            raise ValueError(f"weights shape {w.shape}, expected ({n},)")
        if (w < 0).any():
            raise ValueError("sample weights must be nonnegative")
    _record_floor_events(np.count_nonzero((probs < PROB_FLOOR) & (targets > 0)))
    logp = np.log(np.maximum(probs, PROB_FLOOR))
    loss = float((w * -(targets * logp).sum(axis=1)).sum() / n)
    dlogits = w[:, None] * (probs - targets) / n
    return loss, dlogits


def kl_divergence(p: np.ndarray, q: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean-over-rows KL(p || q); gradient w.r.t. q's logits, p constant."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    n = p.shape[0]
    _record_floor_events(np.count_nonzero((q < PROB_FLOOR) & (p > 0)))
    logq = np.log(np.maximum(q, PROB_FLOOR))
    plogp = np.where(p > 0, p * np.log(np.maximum(p, PROB_FLOOR)), 0.0)
    value = float((plogp - p * logq).sum() / n)
    dlogits_q = (q - p) / n
    return value, dlogits_q


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_adam(params: list[np.ndarray], learning_rate: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    return AdamState(
        learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps,
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
    )


def adam_step(params: list[np.ndarray], grads: list[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    """Standard Adam update with bias correction; params updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state length mismatch")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"param/grad shape mismatch at {i}")
        m, v = state.m[i], state.v[i]
        np.multiply(m, b1, out=m)
        m += (1 - b1) * g
        np.multiply(v, b2, out=v)
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray],
             learning_rate: float) -> list[np.ndarray]:
    """Plain gradient descent; the monotone full-batch mode uses this."""
    for p, g in zip(params, grads):
        p -= learning_rate * g
    return params


class DivergenceError(RuntimeError):
    """Raised when a training loss stops being finite."""


def train_classifier(
    model: MlpModel,
    inputs: np.ndarray,
    targets: np.ndarray,
    rng: np.random.Generator,
    *,
    epochs: int,
    batch_size: int,
    learning_rate: float,
    sample_weights: np.ndarray | None = None,
    optimizer: str = "adam",
    deterministic: bool = False,
    batch_hook=None,
    history: list | None = None,
) -> MlpModel:
    """Shared minibatch cross-entropy loop used by every supervised fit.

    batch_hook(model, trace, batch_indices) may return (extra_loss,
    dloss_dpre) to add a regularizer whose gradient enters at a hidden
    pre-activation. deterministic=True disables dropout, which together
    with optimizer='gd' and a full batch gives the monotone descent mode.
    """
    if optimizer not in ("adam", "gd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    n = len(inputs)
    params = model.params()
    state = init_adam(params, learning_rate) if optimizer == "adam" else None
    mode = "eval" if deterministic or model.dropout_p == 0.0 else "train"
    for epoch in range(epochs):
        order = rng.permutation(n) if batch_size < n else np.arange(n)
        epoch_loss = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            probs, trace = forward(model, inputs[idx], mode=mode, rng=rng)
            w = None if sample_weights is None else sample_weights[idx]
            loss, dlogits = cross_entropy(probs, targets[idx], w)
            dpre = None
            if batch_hook is not None:
                extra_loss, dpre = batch_hook(model, trace, idx)
                loss += extra_loss
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"loss became {loss} at epoch {epoch}; try a smaller "
                    "learning rate")
            grads, _ = backward(model, trace, dlogits, dpre)
            if optimizer == "adam":
                adam_step(params, grads, state)
            else:
                sgd_step(params, grads, learning_rate)
            epoch_loss += loss * len(idx)
        if history is not None:
            history.append({"epoch": epoch, "loss": epoch_loss / n})
    return model


def _fmt_array(a: np.ndarray) -> str:
    return " ".join(float(v).hex() for v in a.ravel())


def _parse_array(s: str, shape) -> np.ndarray:
    vals = [float.fromhex(tok) for tok in s.split()]
    return np.array(vals, dtype=np.float64).reshape(shape)


def save_model(model: MlpModel, path, extra: dict[str, str] | None = None) -> None:
    """Versioned textual checkpoint, exact round trip (hex floats)."""
    lines = ["mlp-checkpoint v1"]
    for key, val in (extra or {}).items():
        if "=" in key or "\n" in str(val):
            raise ValueError(f"bad extra header {key!r}")
        lines.append(f"#{key}={val}")
    lines.append("layer_dims=" + ",".join(str(d) for d in model.layer_dims))
    lines.append(f"leaky_slope={float(model.leaky_slope).hex()}")
    lines.append(f"dropout_p={float(model.dropout_p).hex()}")
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        lines.append(f"W{l}=" + _fmt_array(w))
        lines.append(f"b{l}=" + _fmt_array(b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path) -> tuple[MlpModel, dict[str, str]]:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "mlp-checkpoint v1":
        raise ValueError(f"{path}: not a v1 model checkpoint")
    extra: dict[str, str] = {}
    fields: dict[str, str] = {}
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition("=")
            extra[key] = val
        else:
            key, _, val = line.partition("=")
            fields[key] = val
    dims = [int(t) for t in fields["layer_dims"].split(",")]
    weights, biases = [], []
    for l, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        weights.append(_parse_array(fields[f"W{l}"], (fan_in, fan_out)))
        biases.append(_parse_array(fields[f"b{l}"], (fan_out,)))
    model = MlpModel(
        dims, weights, biases,
        leaky_slope=float.fromhex(fields["leaky_slope"]),
        dropout_p=float.fromhex(fields["dropout_p"]),
    )
    return model, extra
