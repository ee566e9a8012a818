"""Command-line entry point.

Subcommands: gen-data, train, eval, transfer, inspect-latent. Every failure
exits nonzero after printing one ``<category>: <message>`` line on stderr.
The env var DECA_SEED overrides the config seed when set.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .data import JOINT_NAMES, generate_synthetic, load_dataset
from .errors import ConfigError, DecaError
from .model import DecaConfig
from .training import TrainConfig, evaluate, predict, train


def load_config_file(path):
    """Split one flat JSON document into model + train configs.

    Field names mirror the two config dataclasses; unknown keys are rejected.
    """
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    model_keys = {f.name for f in fields(DecaConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    model_cfg = DecaConfig.from_dict({k: v for k, v in raw.items() if k in model_keys})
    train_cfg = TrainConfig.from_dict({k: v for k, v in raw.items() if k in train_keys})
    if "DECA_SEED" in os.environ:
        try:
            train_cfg.seed = int(os.environ["DECA_SEED"])
        except ValueError as e:
            raise ConfigError(f"DECA_SEED must be an integer: {e}") from e
    return model_cfg, train_cfg


def _cmd_gen_data(args):
    views = tuple(v.strip() for v in args.views.split(",") if v.strip())
    seed = int(os.environ.get("DECA_SEED", args.seed))
    manifest = generate_synthetic(
        n=args.num,
        views=views,
        joints=args.joints,
        resolution=(args.res, args.res),
        seed=seed,
        out_dir=args.out,
        domain=args.domain,
    )
    print(f"wrote {len(manifest.samples)} samples to {args.out}")
    return 0


def _cmd_train(args):
    model_cfg, train_cfg = load_config_file(args.config)
    samples = load_dataset(args.data, view=args.train_view, split="train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = train(model_cfg, train_cfg, samples, log_path=out / "train.log.jsonl")
    ckpt_io.save_checkpoint(out, result, model_cfg, train_cfg)
    last = result.epoch_logs[-1] if result.epoch_logs else {}
    print(f"trained {result.step} steps; final loss {last.get('loss_total', float('nan')):.4f}")
    return 0


def _evaluate_to_report(ckpt_dir, data_dir, view, report_path, extra=None):
    result, model_cfg, _ = ckpt_io.load_checkpoint(ckpt_dir)
    samples = load_dataset(data_dir, view=view, split="test")
    report = evaluate(result.model, samples, view_filter=view)
    doc = json.loads(report.to_json())
    if extra:
        doc.update(extra)
    Path(report_path).write_text(json.dumps(doc, indent=2, sort_keys=True))
    print(f"mpjpe {report.mpjpe_mm:.2f} mm | mAP@0.10m {report.map_010:.4f} -> {report_path}")
    return 0


def _cmd_eval(args):
    return _evaluate_to_report(args.ckpt, args.data, args.view, args.report)


def _cmd_transfer(args):
    extra = {"train_view": args.train_view, "test_view": args.test_view}
    return _evaluate_to_report(args.ckpt, args.data, args.test_view, args.report, extra)


def _cmd_inspect_latent(args):
    result, model_cfg, _ = ckpt_io.load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    out = predict(result.model, samples)
    entities = out["entities"]  # [N, J, 16]
    names = JOINT_NAMES if model_cfg.joints == len(JOINT_NAMES) else tuple(
        f"joint_{i}" for i in range(model_cfg.joints)
    )
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["pose_id", "view", "split", "joint_index", "joint_name"]
            + [f"e{k:02d}" for k in range(16)]
        )
        for s, ent in zip(samples, entities):
            for j in range(model_cfg.joints):
                writer.writerow(
                    [s.pose_id, s.view.tag, s.split, j, names[j]] + [repr(float(v)) for v in ent[j]]
                )
    print(f"wrote {len(samples) * model_cfg.joints} entities to {args.out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="deca", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view pose dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, required=True)
    g.add_argument("--views", default="front,top")
    g.add_argument("--joints", type=int, default=15)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--domain", choices=("depth", "rgb"), default="depth")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train a variant on one view's train split")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--train-view", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one view's test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--view", required=True)
    e.add_argument("--report", required=True)
    e.set_defaults(fn=_cmd_eval)

    tr = sub.add_parser("transfer", help="evaluate on a view unseen at training time")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--data", required=True)
    tr.add_argument("--train-view", required=True)
    tr.add_argument("--test-view", required=True)
    tr.add_argument("--report", required=True)
    tr.set_defaults(fn=_cmd_transfer)

    il = sub.add_parser("inspect-latent", help="dump per-joint 16-d entities as CSV")
    il.add_argument("--ckpt", required=True)
    il.add_argument("--data", required=True)
    il.add_argument("--out", required=True)
    il.set_defaults(fn=_cmd_inspect_latent)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except DecaError as e:
        print(f"{e.category}: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"io-error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
