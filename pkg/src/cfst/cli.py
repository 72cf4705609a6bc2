"""Command-line entry points.

Subcommands: gen-data, train, evaluate, sweep, toy-demo. The output root
defaults to $CFST_OUTPUT_ROOT (or ./results). Exit codes: 0 success,
1 configuration error, 2 numeric divergence.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from pathlib import Path

from . import backbones as bb
from . import harness, metrics, nn, selftrain as st, synth
from .datasets import load_bandit, save_bandit
from .harness import ConfigError, ExperimentConfig


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


_CONFIG_FLAGS = [f.name for f in fields(ExperimentConfig)]


def _add_override_flags(parser: _Parser) -> None:
    parser.add_argument("--config", help="key=value config file")
    parser.add_argument("--set", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override any config field (repeatable)")
    parser.add_argument("--out", help="output directory")


def _build_config(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        if key not in _CONFIG_FLAGS:
            raise ConfigError(f"unknown config key {key!r}")
        overrides[key] = harness._parse_typed(
            key, raw, getattr(ExperimentConfig(), key))
    if args.out:
        overrides["output_dir"] = args.out
    if args.config:
        return harness.load_config(args.config, **overrides)
    return ExperimentConfig(**overrides)


def _cmd_gen_data(args) -> int:
    rng = nn.make_rng([args.seed, harness.DATASET_CODES.get(args.dataset, 0)])
    if args.dataset == "toy":
        pts, types = synth.two_moons(args.n, args.noise, rng)
        data = synth.toy_bandit(pts, types, rng)
    elif args.dataset in synth.DEMAND_KINDS:
        spec = synth.make_demand_spec(args.dataset, rng)
        if args.policy == "softmax":
            policy = synth.softmax_overlap_policy(args.overlap, spec.num_prices)
        else:
            policy = synth.proportional_policy(spec.num_prices)
        data = synth.sample_bandit_dataset(spec, args.n, policy, rng)
    elif args.dataset in harness.DATASET_CODES:
        # converted multi-label data; needs the repository files on disk
        cfg = ExperimentConfig(datasets=[args.dataset],
                               data_dir=args.data_dir)
        data = harness.make_dataset(cfg, args.dataset, args.seed).train
    else:
        raise ConfigError(f"unknown dataset {args.dataset!r}")
    save_bandit(data, args.out)
    print(f"wrote {len(data)} samples x {data.num_actions} actions to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _build_config(args)
    seed = args.seed
    if args.data:
        train = load_bandit(args.data)
        bundle = harness.DataBundle(train, train.features, train.ground_truth)
        dataset = Path(args.data).stem
        ds_code = 0
    else:
        dataset = args.dataset
        if dataset is None:
            raise ConfigError("train needs --dataset or --data")
        bundle = harness.make_dataset(cfg, dataset, seed)
        ds_code = harness.DATASET_CODES[dataset]
    rng = nn.make_rng([seed, ds_code, harness.BACKBONE_CODES[args.backbone]])
    model = harness.train_backbone(cfg, args.backbone, bundle.train, rng)
    if args.method != "backbone":
        crng = nn.make_rng([seed, ds_code,
                            harness.BACKBONE_CODES[args.backbone],
                            harness.METHOD_CODES[args.method]])
        model, _ = st.cst_train(model, bundle.train,
                                harness._cst_config(cfg, args.method), crng)
    out = cfg.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{dataset}_{args.backbone}_{args.method}_seed{seed}.model"
    nn.save_model(model, ckpt, extra={
        "backbone": args.backbone, "method": args.method,
        "dataset": dataset, "seed": str(seed),
        "config_hash": harness.config_hash(cfg)})
    if bundle.eval_gt is not None:
        values = metrics.evaluate_model(model, bundle.eval_features,
                                        bundle.eval_gt)
        for name in sorted(values):
            print(f"{name}={values[name]:.6f}")
    print(f"checkpoint: {ckpt}")
    return 0


def _cmd_evaluate(args) -> int:
    model, extra = nn.load_model(args.model)
    data = load_bandit(args.data)
    if data.ground_truth is None:
        raise ConfigError("dataset has no ground-truth table to evaluate against")
    values = metrics.evaluate_model(model, data.features, data.ground_truth)
    for name in sorted(values):
        print(f"{name}={values[name]:.6f}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _build_config(args)
    reports = harness.run_experiment(cfg)
    out = cfg.resolved_output_dir()
    print(f"{len(reports)} aggregated rows per metric family -> {out}")
    for rep in reports:
        print(f"{rep.dataset} {rep.backbone:>5} {rep.method:>8} "
              f"nll={rep.mean['nll']:.4f}+-{rep.stderr['nll']:.4f} "
              f"hamming={rep.mean['hamming']:.4f}")
    return 0


def _cmd_toy_demo(args) -> int:
    cfg = _build_config(args)
    if args.iterations:
        cfg = harness.replace(cfg, toy_iterations=args.iterations)
    _, acc = harness.toy_demo(cfg, seed=args.seed)
    first, last = min(acc), max(acc)
    for it in (first, last):
        row = acc[it]
        print(f"iteration {it}: action-0 acc {row['acc_action0']:.3f}, "
              f"action-1 acc {row['acc_action1']:.3f}")
    print(f"files in {cfg.resolved_output_dir()}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cfst", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a bandit dataset dump")
    p.add_argument("--dataset", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--policy", default="proportional",
                   choices=["proportional", "softmax"])
    p.add_argument("--overlap", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--data-dir", default="data",
                   help="multi-label source files for scene/yeast")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train one backbone/method combination")
    p.add_argument("--dataset")
    p.add_argument("--data", help="bandit dataset dump instead of --dataset")
    p.add_argument("--backbone", default="dm",
                   choices=sorted(harness.BACKBONE_CODES))
    p.add_argument("--method", default="backbone",
                   choices=sorted(harness.METHOD_CODES))
    p.add_argument("--seed", type=int, default=0)
    _add_override_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset dump")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep", help="run the datasets x backbones x methods grid")
    _add_override_flags(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("toy-demo", help="two-moons figure-data reproduction")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=0,
                   help="override toy_iterations")
    _add_override_flags(p)
    p.set_defaults(func=_cmd_toy_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except nn.DivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
