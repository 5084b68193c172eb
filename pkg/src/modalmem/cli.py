"""Command-line entry point: ``modalmem <command> [options]``.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. Errors
print one line ``error: <category>: <message>`` to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, RunConfig, load_config

CONFIG_DIR_ENV = "MODALMEM_CONFIG_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_run_args(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", help="config file; relative names are also looked up in $" + CONFIG_DIR_ENV)
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--out", required=out_required, help="output directory; nothing is written outside it")
    p.add_argument("--workers", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="modalmem", description="Memory-attention multi-modal segmentation toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a seeded synthetic dataset")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=200)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--modalities", default="intensity,edge_event,sparse_range")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a model")
    _add_run_args(t)
    t.add_argument("--manifest", help="dataset manifest (overrides config)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--export-features", metavar="DIR", help="also dump pre/post-memory features here")
    e.add_argument("--all-classes", dest="include_absent", action="store_true", default=True)
    e.add_argument("--occurring-classes", dest="include_absent", action="store_false",
                   help="average IoU over classes that occur in prediction or ground truth only")

    a = sub.add_parser("ablate", help="train and evaluate the four ablation rows")
    _add_run_args(a)
    a.add_argument("--manifest", help="dataset manifest (overrides config)")

    x = sub.add_parser("export-features", help="dump pre/post-memory features for a split")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest", required=True)
    x.add_argument("--split", default="val")
    x.add_argument("--limit", type=int)
    x.add_argument("--out", required=True)

    c = sub.add_parser("check", help="run the built-in oracle checks")
    c.add_argument("--seed", type=int, default=0)
    return ap


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists() and os.environ.get(CONFIG_DIR_ENV):
            path = Path(os.environ[CONFIG_DIR_ENV]) / args.config
        cfg = load_config(path)
    overrides = {}
    for kv in args.overrides:
        if "=" not in kv:
            raise ConfigError(f"override {kv!r} is not KEY=VALUE")
        k, v = kv.split("=", 1)
        overrides[k.strip()] = v
    cfg = cfg.with_overrides(overrides)
    if getattr(args, "manifest", None):
        cfg = cfg.replace(manifest=str(args.manifest))
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg = cfg.replace(workers=args.workers)
    if not cfg.manifest:
        raise ConfigError("no dataset manifest given (config key 'manifest' or --manifest)")
    return cfg


def _cmd_gen_data(args):
    from .data import generate_dataset
    mods = [m.strip() for m in args.modalities.split(",") if m.strip()]
    try:
        m = generate_dataset(args.seed, args.scenes, args.size, mods, args.classes, args.out, args.val_fraction)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    print(f"wrote {len(m.samples)} scenes to {args.out}")


def _cmd_train(args):
    from .data import load_manifest
    from .train import fit
    cfg = resolve_config(args)
    manifest = load_manifest(cfg.manifest)
    res = fit(manifest, cfg, args.out)
    print(json.dumps({"steps": res.checkpoint.step, "best_miou": round(res.checkpoint.best_miou, 2)}))


def _cmd_eval(args):
    from .data import load_manifest
    from .evaluate import export_split_features
    from .metrics import iou_metrics
    from .train import evaluate, load_checkpoint
    from .data import SceneSet
    ck = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    m = iou_metrics(evaluate(ck.model, SceneSet(manifest, args.split), ck.cfg), args.include_absent)
    print(json.dumps({"split": args.split, **m.as_dict()}))
    if args.export_features:
        export_split_features(ck.model, manifest, ck.cfg, args.export_features, args.split)


def _cmd_ablate(args):
    from .evaluate import ablation_run, format_ablation_table
    cfg = resolve_config(args)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(args.out) / "resolved.cfg")
    rows = ablation_run(cfg.manifest, cfg, args.out)
    print(format_ablation_table(rows))


def _cmd_export(args):
    from .data import load_manifest
    from .evaluate import export_split_features
    from .train import load_checkpoint
    ck = load_checkpoint(args.checkpoint)
    doc = export_split_features(ck.model, load_manifest(args.manifest), ck.cfg, args.out, args.split, args.limit)
    print(f"wrote {len(doc['features'])} feature files to {args.out}")


def _cmd_check(args):
    from .checks import run_checks
    if not run_checks(args.seed):
        raise RuntimeError("oracle checks failed")


COMMANDS = {"gen-data": _cmd_gen_data, "train": _cmd_train, "eval": _cmd_eval, "ablate": _cmd_ablate,
            "export-features": _cmd_export, "check": _cmd_check}


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"error: usage: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(max(1, getattr(args, "workers", 1) or 1))
    try:
        COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
        return 2
    except (OSError, FileNotFoundError) as e:
        print(f"error: io: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001
        print(f"error: runtime: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
