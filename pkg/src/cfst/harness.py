"""Experiment harness: configuration, seeded sweeps over datasets x
backbones x methods, CSV serialization, and the toy-demo reproduction."""

from __future__ import annotations

import csv
import hashlib
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import backbones as bb
from . import metrics as mt
from . import multilabel as ml
from . import nn
from . import selftrain as st
from . import synth
from .datasets import BanditDataset, GroundTruthTable, split_bandit

log = logging.getLogger(__name__)


class ConfigError(Exception):
    """Invalid experiment configuration (maps to exit code 1)."""


DATASET_CODES = {"D1": 1, "D2": 2, "D3": 3, "D4": 4, "D5": 5,
                 "toy": 6, "scene": 7, "yeast": 8}
BACKBONE_CODES = {"dm": 1, "hsic": 2, "udm": 3}
METHOD_CODES = {"backbone": 1, "pl": 2, "pl_cvat": 3}

# execution details that must not change results or the config hash
_UNHASHED_FIELDS = {"output_dir", "workers", "write_history"}


@dataclass
class ExperimentConfig:
    # data
    datasets: list[str] = field(default_factory=lambda: ["D1"])
    n_samples: int = 1000
    policy: str = "proportional"        # proportional | softmax
    overlap: float = 1.0                # softmax policy strength o
    data_dir: str = "data"
    policy_fraction: float = 0.05
    policy_temperature: float = 1.0
    exclude_policy_rows: bool = False
    # network + backbones
    backbones: list[str] = field(default_factory=lambda: ["dm"])
    hidden_dims: tuple[int, ...] = (128, 128)
    dropout_p: float = 0.2
    leaky_slope: float = 0.01
    backbone_epochs: int = 600
    backbone_batch: int = 256
    backbone_lr: float = 2e-3
    hsic_lambda: float = 0.01
    rbf_sigma: float = 0.5
    embedding_layer: int = 1
    propensity_floor: float = 0.01
    propensity_epochs: int = 60
    propensity_lr: float = 0.01
    # methods + self-training
    methods: list[str] = field(default_factory=lambda: ["backbone", "pl", "pl_cvat"])
    outer_iterations: int = 2
    inner_epochs: int = 15
    cst_batch: int = 256
    cst_lr: float = 1e-3
    reimpute_every: int = 1
    reinit_inner: bool = True       # retrain from scratch on the imputed table
    lambda_cvat: float = 1.0
    lambda_grid: list[float] | None = None
    val_fraction: float = 0.2
    cvat_xi: float = 10.0
    cvat_power_iters: int = 3
    cvat_epsilon: float = 1.0
    # run control
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = ""
    workers: int = 1
    write_history: bool = True
    # toy demo
    toy_samples: int = 50
    toy_noise: float = 0.05
    toy_hidden: tuple[int, ...] = (16, 16)
    toy_dropout: float = 0.5
    toy_backbone_epochs: int = 4000
    toy_backbone_lr: float = 2e-3
    toy_iterations: int = 10
    toy_inner_epochs: int = 80
    toy_cst_lr: float = 5e-3
    toy_cst_batch: int = 16
    toy_cvat_epsilon: float = 0.5
    toy_test_points: int = 500
    grid_resolution: int = 100
    grid_margin: float = 0.5

    def __post_init__(self):
        for ds in self.datasets:
            if ds not in DATASET_CODES:
                raise ConfigError(f"unknown dataset {ds!r}")
        for kind in self.backbones:
            if kind not in BACKBONE_CODES:
                raise ConfigError(f"unknown backbone {kind!r}")
        for m in self.methods:
            if m not in METHOD_CODES:
                raise ConfigError(f"unknown method {m!r}")
        if self.policy not in ("proportional", "softmax"):
            raise ConfigError(f"unknown policy {self.policy!r}")
        if "pl_cvat" in self.methods and self.lambda_cvat <= 0 \
                and not self.lambda_grid:
            raise ConfigError("pl_cvat needs lambda_cvat > 0 or lambda_grid")
        if not self.seeds:
            raise ConfigError("need at least one seed")

    def resolved_output_dir(self) -> Path:
        root = self.output_dir or os.environ.get("CFST_OUTPUT_ROOT", "results")
        return Path(root)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, (list, tuple)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(float(v))
    if v is None:
        return "none"
    return str(v)


def dump_config(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}"
             for f in sorted(fields(cfg), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    lines = [f"{f.name}={_format_value(getattr(cfg, f.name))}"
             for f in sorted(fields(cfg), key=lambda f: f.name)
             if f.name not in _UNHASHED_FIELDS]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:12]


def _parse_typed(name: str, raw: str, default):
    raw = raw.strip()
    if name == "lambda_grid":
        return None if raw.lower() in ("", "none") else \
            [float(t) for t in raw.split(",") if t]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(t) for t in raw.split(",") if t)
    if isinstance(default, list):
        elem = default[0] if default else ""
        if isinstance(elem, int):
            return [int(t) for t in raw.split(",") if t]
        if isinstance(elem, float):
            return [float(t) for t in raw.split(",") if t]
        return [t.strip() for t in raw.split(",") if t.strip()]
    return raw


def parse_config_text(text: str, **overrides) -> ExperimentConfig:
    """Flat key=value lines; [section] headers and # comments are allowed
    and ignored. Keyword overrides win over file values."""
    defaults = ExperimentConfig()
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith(("#", ";", "[")):
            continue
        if "=" not in stripped:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if not hasattr(defaults, key):
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_typed(key, raw, getattr(defaults, key))
        except ValueError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from exc
    values.update(overrides)
    try:
        return ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, **overrides) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, **overrides)


@dataclass
class DataBundle:
    train: BanditDataset
    eval_features: np.ndarray
    eval_gt: GroundTruthTable


def _find_multilabel_file(cfg: ExperimentConfig, name: str, part: str) -> Path:
    candidates = [Path(cfg.data_dir) / f"{name}_{part}{suffix}"
                  for suffix in (".svm", ".txt", "")]
    for cand in candidates:
        if cand.is_file():
            return cand
    raise ConfigError(
        f"no {name} {part} file found; tried " +
        ", ".join(str(c) for c in candidates))


def _membership_table(data: ml.MultiLabelDataset) -> GroundTruthTable:
    labels = np.zeros((len(data), data.num_labels), dtype=np.int64)
    for i, lset in enumerate(data.label_sets):
        for l in lset:
            labels[i, l] = 1
    return GroundTruthTable(probs=labels.astype(np.float64), labels=labels)


def make_dataset(cfg: ExperimentConfig, dataset: str, seed: int) -> DataBundle:
    rng = nn.make_rng([seed, DATASET_CODES[dataset]])
    if dataset in synth.DEMAND_KINDS:
        spec = synth.make_demand_spec(dataset, rng)
        if cfg.policy == "proportional":
            policy = synth.proportional_policy(spec.num_prices)
        else:
            policy = synth.softmax_overlap_policy(cfg.overlap, spec.num_prices)
        train = synth.sample_bandit_dataset(spec, cfg.n_samples, policy, rng)
        return DataBundle(train, train.features, train.ground_truth)
    if dataset == "toy":
        pts, types = synth.two_moons(cfg.toy_samples, cfg.toy_noise, rng)
        train = synth.toy_bandit(pts, types, rng)
        # evaluation grid: noiseless points on the two arcs
        test_pts, test_types = synth.two_moons(cfg.toy_test_points, 0.0, rng)
        labels = np.zeros((len(test_pts), 2), dtype=np.int64)
        labels[np.arange(len(test_pts)), test_types] = 1
        gt = GroundTruthTable(probs=labels.astype(np.float64), labels=labels)
        return DataBundle(train, test_pts, gt)
    # LIBSVM multi-label conversion (scene / yeast)
    train_text = _find_multilabel_file(cfg, dataset, "train").read_text()
    test_text = _find_multilabel_file(cfg, dataset, "test").read_text()
    train_ml = ml.parse_libsvm_multilabel(train_text)
    test_ml = ml.parse_libsvm_multilabel(
        test_text, num_features=train_ml.feature_dim,
        num_labels=train_ml.num_labels)
    policy = ml.fit_logging_policy(
        train_ml, cfg.policy_fraction, rng,
        temperature=cfg.policy_temperature)
    bandit = ml.convert_to_bandit(train_ml, policy, rng)
    if cfg.exclude_policy_rows and policy.subsample_indices is not None:
        keep = np.setdiff1d(np.arange(len(bandit)), policy.subsample_indices)
        bandit = bandit.subset(keep)
    return DataBundle(bandit, test_ml.features, _membership_table(test_ml))


def _backbone_config(cfg: ExperimentConfig, kind: str) -> bb.BackboneConfig:
    return bb.BackboneConfig(
        kind=kind, hidden_dims=tuple(cfg.hidden_dims), dropout_p=cfg.dropout_p,
        leaky_slope=cfg.leaky_slope, epochs=cfg.backbone_epochs,
        batch_size=cfg.backbone_batch, learning_rate=cfg.backbone_lr,
        hsic_lambda=cfg.hsic_lambda, rbf_sigma=cfg.rbf_sigma,
        embedding_layer=cfg.embedding_layer,
        propensity_floor=cfg.propensity_floor)


def _cst_config(cfg: ExperimentConfig, method: str) -> st.CstConfig:
    return st.CstConfig(
        outer_iterations=cfg.outer_iterations, inner_epochs=cfg.inner_epochs,
        batch_size=cfg.cst_batch, learning_rate=cfg.cst_lr,
        reimpute_every=cfg.reimpute_every, reinit_inner=cfg.reinit_inner,
        lambda_cvat=cfg.lambda_cvat if method == "pl_cvat" else 0.0,
        cvat_xi=cfg.cvat_xi, cvat_power_iters=cfg.cvat_power_iters,
        cvat_epsilon=cfg.cvat_epsilon)


def train_backbone(cfg: ExperimentConfig, kind: str, data: BanditDataset,
                   rng: np.random.Generator) -> nn.MlpModel:
    config = _backbone_config(cfg, kind)
    if kind == "dm":
        return bb.train_dm(data, config, rng)
    if kind == "hsic":
        return bb.train_hsic(data, config, rng)
    propensity = bb.fit_propensity(
        data, rng, epochs=cfg.propensity_epochs,
        learning_rate=cfg.propensity_lr, floor=cfg.propensity_floor)
    return bb.train_udm(data, propensity, config, rng)


def run_seed_job(cfg: ExperimentConfig, dataset: str, seed: int):
    """Train and evaluate every backbone x method combination for one seed.

    Returns (metric rows, history rows); safe to run in a worker process.
    """
    bundle = make_dataset(cfg, dataset, seed)
    ds_code = DATASET_CODES[dataset]
    rows, history_rows = [], []

    def emit(backbone, method, values):
        for name in sorted(values):
            rows.append({"dataset": dataset, "backbone": backbone,
                         "method": method, "seed": seed, "metric": name,
                         "value": values[name]})

    for kind in cfg.backbones:
        rng = nn.make_rng([seed, ds_code, BACKBONE_CODES[kind]])
        model = train_backbone(cfg, kind, bundle.train, rng)
        if "backbone" in cfg.methods:
            emit(kind, "backbone",
                 mt.evaluate_model(model, bundle.eval_features, bundle.eval_gt))
        for method in ("pl", "pl_cvat"):
            if method not in cfg.methods:
                continue
            crng = nn.make_rng([seed, ds_code, BACKBONE_CODES[kind],
                                METHOD_CODES[method]])
            cst_cfg = _cst_config(cfg, method)
            if method == "pl_cvat" and cfg.lambda_grid:
                tr, val = split_bandit(bundle.train, cfg.val_fraction,
                                       crng.spawn(1)[0])
                lam = st.select_lambda(model, tr, val, cfg.lambda_grid,
                                       cst_cfg, crng.spawn(1)[0])
                cst_cfg = replace(cst_cfg, lambda_cvat=lam)
            trained, hist = st.cst_train(model, bundle.train, cst_cfg, crng)
            emit(kind, method,
                 mt.evaluate_model(trained, bundle.eval_features, bundle.eval_gt))
            if cfg.write_history:
                for rec in hist:
                    history_rows.append({
                        "dataset": dataset, "backbone": kind, "method": method,
                        "seed": seed, **rec})
    return rows, history_rows


def _job_entry(args):
    cfg, dataset, seed = args
    return dataset, seed, run_seed_job(cfg, dataset, seed)


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _format_value(row.get(k)) for k in fieldnames})


_ROW_KEY = ("dataset", "backbone", "method", "seed", "metric")


def run_experiment(cfg: ExperimentConfig):
    """Run the full sweep and write per-seed, aggregated, and history CSVs.

    Rows are sorted before writing so worker scheduling cannot change the
    output bytes. On numeric divergence, everything finished so far is
    still written before the error propagates.
    """
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(cfg)
    (out / "config.txt").write_text(dump_config(cfg))

    jobs = [(cfg, ds, seed) for ds in cfg.datasets for seed in cfg.seeds]
    seed_rows: list[dict] = []
    history_rows: list[dict] = []
    failure = None
    try:
        if cfg.workers > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                for _, _, (rows, hist) in pool.map(_job_entry, jobs):
                    seed_rows.extend(rows)
                    history_rows.extend(hist)
        else:
            for job in jobs:
                _, _, (rows, hist) = _job_entry(job)
                seed_rows.extend(rows)
                history_rows.extend(hist)
    except nn.DivergenceError as exc:
        failure = exc

    for row in seed_rows:
        row["config_hash"] = chash
    seed_rows.sort(key=lambda r: tuple(str(r[k]) for k in _ROW_KEY))
    _write_csv(out / "per_seed.csv",
               [*_ROW_KEY, "value", "config_hash"], seed_rows)

    reports = []
    combos = sorted({(r["dataset"], r["backbone"], r["method"])
                     for r in seed_rows})
    for ds, kind, method in combos:
        per_seed = []
        for seed in cfg.seeds:
            vals = {r["metric"]: r["value"] for r in seed_rows
                    if (r["dataset"], r["backbone"], r["method"], r["seed"])
                    == (ds, kind, method, seed)}
            if vals:
                per_seed.append(vals)
        reports.append(mt.aggregate(per_seed, dataset=ds, backbone=kind,
                                    method=method, config_hash=chash,
                                    seeds=cfg.seeds[:len(per_seed)]))
    agg_rows = [row for rep in reports for row in mt.report_rows(rep)]
    agg_rows.sort(key=lambda r: (r["dataset"], r["backbone"], r["method"],
                                 r["metric"]))
    _write_csv(out / "aggregate.csv",
               ["dataset", "backbone", "method", "metric", "mean", "stderr",
                "seeds", "config_hash"], agg_rows)

    if cfg.write_history:
        for row in history_rows:
            row["config_hash"] = chash
        history_rows.sort(key=lambda r: (
            r["dataset"], r["backbone"], r["method"], r["seed"], r["outer"],
            r["epoch"], r["event"]))
        _write_csv(out / "history.csv",
                   ["dataset", "backbone", "method", "seed", "outer", "epoch",
                    "event", "cst_loss", "cvat_loss", "loss_before", "changes",
                    "config_hash"], history_rows)
    if failure is not None:
        raise failure
    return reports


def per_action_accuracy(model: nn.MlpModel, features: np.ndarray,
                        labels: np.ndarray) -> np.ndarray:
    """Per-action fraction of cells whose argmax prediction matches the
    deterministic outcome table."""
    probs = mt._cell_probs(model, features, labels.shape[1])
    return (probs.argmax(axis=2) == labels).mean(axis=0)


def toy_demo(cfg: ExperimentConfig, seed: int | None = None):
    """Two-moons walkthrough: a biased direct-method fit, then iterative
    self-training with the consistency penalty. Writes plot-ready CSVs of
    the per-iteration decision boundaries and pseudolabel assignments."""
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    seed = cfg.seeds[0] if seed is None else seed
    chash = config_hash(cfg)

    bundle = make_dataset(cfg, "toy", seed)
    train = bundle.train
    rng = nn.make_rng([seed, DATASET_CODES["toy"], 100])
    bcfg = _backbone_config(cfg, "dm")
    bcfg = replace(bcfg, hidden_dims=tuple(cfg.toy_hidden),
                   dropout_p=cfg.toy_dropout, epochs=cfg.toy_backbone_epochs,
                   learning_rate=cfg.toy_backbone_lr, batch_size=len(train))
    backbone = bb.train_dm(train, bcfg, rng)

    snapshots: dict[int, nn.MlpModel] = {0: backbone.copy()}
    cst_cfg = _cst_config(cfg, "pl_cvat")
    # dropout stays a property of the warm-start model; the self-training
    # rounds themselves run the deterministic forward
    cst_cfg = replace(cst_cfg, outer_iterations=cfg.toy_iterations,
                      inner_epochs=cfg.toy_inner_epochs,
                      learning_rate=cfg.toy_cst_lr,
                      cvat_epsilon=cfg.toy_cvat_epsilon,
                      batch_size=min(cfg.toy_cst_batch, len(train)),
                      deterministic=True, reinit_inner=False)
    crng = nn.make_rng([seed, DATASET_CODES["toy"], 101])
    st.cst_train(backbone, train, cst_cfg, crng,
                 snapshot_hook=lambda it, m: snapshots.__setitem__(it, m))

    lo = train.features.min(axis=0) - cfg.grid_margin
    hi = train.features.max(axis=0) + cfg.grid_margin
    xs = np.linspace(lo[0], hi[0], cfg.grid_resolution)
    ys = np.linspace(lo[1], hi[1], cfg.grid_resolution)
    gx, gy = np.meshgrid(xs, ys)
    grid = np.column_stack([gx.ravel(), gy.ravel()])

    boundary_rows, label_rows, acc_rows = [], [], []
    for it in sorted(snapshots):
        model = snapshots[it]
        probs = mt._cell_probs(model, grid, train.num_actions)[:, :, 1]
        for a in range(train.num_actions):
            for g, p in zip(grid, probs[:, a]):
                boundary_rows.append({"iteration": it, "action": a,
                                      "x0": g[0], "x1": g[1], "p_buy": p,
                                      "config_hash": chash})
        table = st.impute_pseudolabels(model, train)
        classes = table.labels.argmax(axis=2)
        for i in range(len(train)):
            for a in range(train.num_actions):
                label_rows.append({
                    "iteration": it, "sample": i, "action": a,
                    "label": int(classes[i, a]),
                    "factual": int(table.factual_mask[i, a]),
                    "config_hash": chash})
        acc = per_action_accuracy(model, bundle.eval_features,
                                  bundle.eval_gt.labels)
        acc_rows.append({"iteration": it,
                         **{f"acc_action{a}": acc[a]
                            for a in range(train.num_actions)},
                         "config_hash": chash})

    _write_csv(out / "toy_boundary.csv",
               ["iteration", "action", "x0", "x1", "p_buy", "config_hash"],
               boundary_rows)
    _write_csv(out / "toy_pseudolabels.csv",
               ["iteration", "sample", "action", "label", "factual",
                "config_hash"], label_rows)
    _write_csv(out / "toy_accuracy.csv",
               ["iteration", "acc_action0", "acc_action1", "config_hash"],
               acc_rows)
    point_rows = [{"x0": train.features[i, 0], "x1": train.features[i, 1],
                   "point_type": int(train.ground_truth.labels[i, 1]),
                   "action": int(train.actions[i]),
                   "outcome": int(train.outcomes[i]), "config_hash": chash}
                  for i in range(len(train))]
    _write_csv(out / "toy_points.csv",
               ["x0", "x1", "point_type", "action", "outcome", "config_hash"],
               point_rows)
    return snapshots, {row["iteration"]: row for row in acc_rows}
