"""Command-line entry point: ``usermoe <subcommand> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
All relative paths are resolved against ``--workdir``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import config as config_mod
from .data import (fit_dense_stats, generate_synthetic, load_dataset, load_schema, normalize_dense,
                   save_schema, split_dataset, write_dataset)
from .errors import ConfigError, UserMoeError

log = logging.getLogger("usermoe")

CATEGORIES = [
    ("ConfigError", "config"), ("ParseError", "data"), ("SchemaError", "data"),
    ("VocabularyError", "data"), ("CheckpointError", "checkpoint"), ("NumericError", "numeric"),
    ("ContractError", "contract"), ("DimensionError", "contract"),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--workdir", default=".", help="base directory for relative paths")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="usermoe", description="Mixture-of-experts user representation pipeline.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and its schema")
    _common(p)
    p.add_argument("--preset", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-instances", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("pretrain", help="masked channel pre-training")
    _common(p)
    p.add_argument("--out", default="pretrain.ckpt.json")
    p.add_argument("--metrics", default="pretrain.metrics.jsonl")

    p = sub.add_parser("finetune", help="train task towers (optionally from a checkpoint)")
    _common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--out", default="finetune.ckpt.json")
    p.add_argument("--metrics", default="finetune.metrics.jsonl")
    p.add_argument("--freeze-encoder", action="store_true")

    p = sub.add_parser("embed", help="export pooled user embeddings")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", default="embeddings.jsonl")

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="validation", choices=["train", "validation", "test", "all"])

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


# -- helpers ------------------------------------------------------------------

def _path(workdir, path):
    return path if os.path.isabs(path) else os.path.join(workdir, path)


def load_run_config(args):
    cfg = config_mod.load_config(_path(args.workdir, args.config)) if args.config else config_mod.RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, val = (s.strip() for s in item.split("=", 1))
        try:
            overrides[key] = json.loads(val)
        except json.JSONDecodeError:
            overrides[key] = val
    return cfg.with_overrides(**overrides) if overrides else cfg


def load_data(cfg, workdir):
    """The configured dataset: a file (with schema sidecar) or a synthetic preset."""
    if cfg.data:
        data = _path(workdir, cfg.data)
        schema = _path(workdir, cfg.schema) if cfg.schema else os.path.join(os.path.dirname(data), "schema.json")
        return load_dataset(data, load_schema(schema))
    kw = {"n_instances": cfg.n_instances} if cfg.n_instances else {}
    preset = cfg.preset or "custom"
    return generate_synthetic(preset, seed=cfg.seed, **kw)


def splits(cfg, ds, whole=False):
    """Train/validation/test splits with dense channels standardised by train statistics.

    With ``whole`` the full dataset (standardised the same way) is appended.
    """
    parts = split_dataset(ds, (1.0 - cfg.val_ratio - cfg.test_ratio, cfg.val_ratio, cfg.test_ratio), cfg.seed)
    stats = fit_dense_stats(parts[0])
    return tuple(normalize_dense(d, stats) for d in (*parts, ds) if whole or d is not ds)


def _print(obj):
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


# -- subcommands ----------------------------------------------------------------

def cmd_gen_data(args):
    cfg = load_run_config(args)
    preset = args.preset or cfg.preset
    seed = cfg.seed if args.seed is None else args.seed
    n = args.n_instances if args.n_instances is not None else cfg.n_instances
    ds = generate_synthetic(preset, seed=seed, **({"n_instances": n} if n else {}))
    out = _path(args.workdir, args.out)
    os.makedirs(out, exist_ok=True)
    write_dataset(ds, os.path.join(out, "data.jsonl"))
    save_schema(ds.schema, os.path.join(out, "schema.json"))
    lengths = [inst.length for inst in ds.instances]
    _print({"preset": preset, "seed": seed, "instances": len(ds), "channels": len(ds.schema.channels),
            "tasks": len(ds.schema.tasks), "mean_length": float(np.mean(lengths)) if lengths else 0.0,
            "out": out})
    return 0


def cmd_pretrain(args):
    from .io import MetricsWriter, save_checkpoint
    from .pretrain import pretrain

    cfg = load_run_config(args)
    train, val, _ = splits(cfg, load_data(cfg, args.workdir))
    with MetricsWriter(_path(args.workdir, args.metrics)) as metrics:
        result = pretrain(train, cfg, metrics=metrics, validation=val)
    save_checkpoint(result.model, _path(args.workdir, args.out), cfg,
                    np.random.default_rng(cfg.seed), result.steps, kind="pretrain")
    _print({"steps": result.steps, "history": result.history[-1:] if result.history else [],
            "checkpoint": _path(args.workdir, args.out)})
    return 0


def cmd_finetune(args):
    from .finetune import finetune
    from .io import MetricsWriter, save_checkpoint

    cfg = load_run_config(args)
    if args.freeze_encoder:
        cfg = cfg.with_overrides(freeze_encoder=True)
    train, val, test = splits(cfg, load_data(cfg, args.workdir))
    ckpt = _path(args.workdir, args.checkpoint) if args.checkpoint else None
    with MetricsWriter(_path(args.workdir, args.metrics)) as metrics:
        model, report = finetune(train, val, cfg, checkpoint=ckpt, test=test, metrics=metrics)
    steps = report["records"][-1]["step"] if report["records"] else 0
    save_checkpoint(model, _path(args.workdir, args.out), cfg, np.random.default_rng(cfg.seed), steps,
                    kind="finetune")
    _print({k: report[k] for k in ("validation", "test", "lambda_history") if k in report})
    return 0


def cmd_embed(args):
    from .finetune import export_embeddings
    from .io import load_checkpoint

    cfg = load_run_config(args)
    ckpt = load_checkpoint(_path(args.workdir, args.checkpoint))
    ds = splits(cfg, load_data(cfg, args.workdir), whole=True)[-1]
    model = ckpt.build_model(ds.schema)
    out = _path(args.workdir, args.out)
    users, _ = export_embeddings(ds, model, out, cfg.batch_size, cfg.max_len or None,
                                 source=os.path.basename(args.checkpoint))
    _print({"users": int(users.size), "dim": model.config.d_model, "out": out})
    return 0


def cmd_eval(args):
    from .finetune import evaluate, predict
    from .io import load_checkpoint, recall_at_precision

    cfg = load_run_config(args)
    ckpt = load_checkpoint(_path(args.workdir, args.checkpoint))
    parts = dict(zip(("train", "validation", "test", "all"), splits(cfg, load_data(cfg, args.workdir), whole=True)))
    ds = parts[args.split]
    if not len(ds):
        raise ConfigError(f"split {args.split!r} is empty under the configured ratios")
    model = ckpt.build_model(ds.schema)
    report = evaluate(model, ds, cfg.batch_size, cfg.max_len or None)
    scores = predict(model, ds, cfg.batch_size, cfg.max_len or None)
    for task in ds.schema.tasks:
        if not task.is_classification:
            continue
        active = np.array([inst.indicators.get(task.name, 0) > 0 for inst in ds.instances])
        y = np.array([inst.labels.get(task.name, 0.0) for inst in ds.instances])[active]
        if 0 < y.sum() < y.size:
            for level in (85, 50):
                r, ok = recall_at_precision(scores[task.name][active], y, level)
                report.setdefault(f"recall_at_precision_{level}", {})[task.name] = r
                report.setdefault(f"recall_at_precision_{level}_feasible", {})[task.name] = ok
    _print(report)
    return 0


def cmd_grad_check(args):
    from .gradcheck import run_default

    report = run_default(seed=args.seed)
    ok = report.passed(args.tol)
    print(f"max relative error {report.max_rel_error:.3e} at {report.worst}")
    print(f"checked {report.checked} coordinates, skipped {report.skipped} at kinks, "
          f"{report.seconds:.1f}s -> {'PASS' if ok else 'FAIL'} (tolerance {args.tol:g})")
    return 0 if ok else 1


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "embed": cmd_embed, "eval": cmd_eval, "grad-check": cmd_grad_check,
}


def _category(exc):
    for cls in type(exc).__mro__:
        for name, cat in CATEGORIES:
            if cls.__name__ == name:
                return cat
    return "runtime"


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 2
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if not os.path.isdir(args.workdir):
            raise ConfigError(f"workdir {args.workdir} does not exist")
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"usermoe: usage error: {exc}", file=sys.stderr)
        return 2
    except UserMoeError as exc:
        print(f"usermoe: {_category(exc)} error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"usermoe: io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
