"""``capmod`` command line: gen-data, train, modify, eval, grad-check.

Exit codes: 0 success, 2 usage or bad input, 3 numerical failure.

Training settings resolve as defaults, then command-line flags, then the
``--config`` JSON file (the file wins). Every run writes the resolved
settings to ``<out>/run_config.json``; passing that file back as
``--config`` reproduces the run.

When ``CAPMOD_DATA_DIR`` is set, relative data paths are looked up there,
and ``gen-data --out`` defaults to it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from dataclasses import fields
from pathlib import Path

from . import gradcheck
from .autodiff import NumericalError
from .corpus import (FormatError, IngestionError, SyntheticSceneSpec, generate_synthetic,
                     read_jsonl_dataset, write_jsonl_dataset)
from .inference import modify, trace_csv
from .metrics import MetricError, evaluate, score_captions
from .trainer import CheckpointError, TrainConfig, TrainingDiverged, load_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
DATA_DIR_ENV = "CAPMOD_DATA_DIR"

log = logging.getLogger("capmod")


class UsageError(Exception):
    pass


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def data_path(value):
    """Resolve a data path, falling back to $CAPMOD_DATA_DIR for relative names."""
    if value is None:
        return None
    p = Path(value)
    base = os.environ.get(DATA_DIR_ENV)
    if not p.is_absolute() and not p.exists() and base:
        p = Path(base) / p
    return p


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read {what} {path}: {exc}") from None


def _load_dataset(path, what):
    p = data_path(path)
    if p is None:
        raise UsageError(f"--{what} is required")
    try:
        examples = read_jsonl_dataset(p)
    except OSError as exc:
        raise UsageError(f"cannot read {what} dataset {p}: {exc}") from None
    if not examples:
        raise UsageError(f"{what} dataset {p} is empty")
    return examples


def _prepare_out(path):
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"output directory {out} is not writable: {exc}") from None
    return out


# ----------------------------------------------------------------- commands

def cmd_gen_data(args):
    out_arg = args.out or os.environ.get(DATA_DIR_ENV)
    if not out_arg:
        raise UsageError(f"--out is required (or set {DATA_DIR_ENV})")
    spec = SyntheticSceneSpec.from_dict(_read_json(args.spec, "scene spec")) if args.spec else SyntheticSceneSpec()
    out = _prepare_out(out_arg)
    examples = generate_synthetic(spec, args.n, args.seed)
    path = write_jsonl_dataset(examples, out, args.name)
    (out / "scene_spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    policies = Counter(ex.policy for ex in examples)
    attr_counts = Counter(len(ex.attributes) for ex in examples)
    gold_vocab = {w for ex in examples for g in ex.gold for w in g}
    stats = {"examples": len(examples), "path": str(path), "policies": dict(sorted(policies.items())),
             "attributes_per_example": dict(sorted(attr_counts.items())),
             "gold_refs_per_example": sum(len(ex.gold) for ex in examples) / len(examples),
             "gold_word_types": len(gold_vocab)}
    print(json.dumps(stats, indent=1))
    return EXIT_OK


def resolve_train_config(args):
    """defaults < flags < config file."""
    values = {}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    paths = {"data": args.data, "val": args.val}
    if args.config:
        cfg_file = _read_json(args.config, "config")
        for key in ("data", "val"):
            if key in cfg_file:
                paths[key] = cfg_file.pop(key)
        values.update(cfg_file)
    try:
        cfg = TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training configuration: {exc}") from None
    return cfg, paths


def cmd_train(args):
    cfg, paths = resolve_train_config(args)
    train_set = _load_dataset(paths["data"], "data")
    val_set = _load_dataset(paths["val"], "val")
    out = _prepare_out(args.out)
    resolved = dict(cfg.to_dict(), data=str(data_path(paths["data"])), val=str(data_path(paths["val"])))
    (out / "run_config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    try:
        result = train(train_set, val_set, cfg, out_dir=out, resume=args.resume)
    except TrainingDiverged as exc:
        (out / "diverged.json").write_text(json.dumps(exc.diagnostics, indent=1, sort_keys=True),
                                           encoding="utf-8")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_cider": result.best_cider,
                      "epochs_run": len(result.history), "stopped_early": result.stopped_early,
                      "checkpoint": str(out / "best.ckpt")}, indent=1))
    return EXIT_OK


def cmd_modify(args):
    params, vocab, _, _ = load_checkpoint(args.ckpt)
    examples = _load_dataset(args.input, "input")
    mods = [modify(params, ex, vocab, k=args.beam, max_len=args.max_len) for ex in examples]
    out = Path(args.out)
    _prepare_out(out.parent if str(out.parent) else ".")
    out.write_text("".join(json.dumps(m.record()) + "\n" for m in mods), encoding="utf-8")
    if args.trace_csv:
        Path(args.trace_csv).write_text(trace_csv(mods), encoding="utf-8")
    print(f"wrote {len(mods)} modified captions to {out}")
    return EXIT_OK


def cmd_eval(args):
    params, vocab, side, _ = load_checkpoint(args.ckpt)
    examples = _load_dataset(args.data, "data")
    bundle = evaluate(params, examples, vocab, beam=args.beam, max_len=args.max_len,
                      expected_vocab=side["vocab_hash"])
    baseline = score_captions([ex.existing for ex in examples],
                              [ex.gold for ex in examples])
    report = {"beam": args.beam, "n_images": len(examples), "modified": bundle.scores,
              "existing": baseline, "delta_cider": bundle.scores["cider"] - baseline["cider"]}
    text = json.dumps(report, indent=1, sort_keys=True)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{Path(args.data).stem}.json"
    out.write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_grad_check(args):
    try:
        dims = gradcheck.GradCheckDims.parse(args.dims)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    report = gradcheck.run(dims, seed=args.seed, max_entries=args.max_entries)
    print(gradcheck.format_report(report))
    ok = gradcheck.passed(report)
    print("PASS" if ok else f"FAIL: a group exceeds relative error {gradcheck.TOLERANCE:g}")
    return EXIT_OK if ok else EXIT_NUMERICAL


# ------------------------------------------------------------------ parser

def build_parser():
    parser = argparse.ArgumentParser(prog="capmod", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic modification dataset")
    p.add_argument("--spec", help="scene spec JSON (default: built-in spec)")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help=f"output directory (default: ${DATA_DIR_ENV})")
    p.add_argument("--name", default="data.jsonl")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data")
    p.add_argument("--val")
    p.add_argument("--config", help="JSON of training settings; overrides flags")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="continue from a last.ckpt")
    for f in fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool",):
            p.add_argument(flag, dest=f.name, type=lambda s: s.lower() in ("1", "true", "yes"), default=None)
        elif f.name == "patience":
            p.add_argument(flag, dest=f.name, type=int, default=None)
        else:
            conv = {"int": int, "float": float}.get(f.type, str)
            p.add_argument(flag, dest=f.name, type=conv, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("modify", help="modify existing captions with a trained model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--beam", type=_positive_int, default=3)
    p.add_argument("--max-len", type=_positive_int, default=30)
    p.add_argument("--out", required=True)
    p.add_argument("--trace-csv", help="also write per-token gate traces as CSV")
    p.set_defaults(func=cmd_modify)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=_positive_int, default=3)
    p.add_argument("--max-len", type=_positive_int, default=30)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference check of every parameter group")
    p.add_argument("--dims", default="", help="overrides such as d=8,hidden=12,emb=8,vocab=20,p=4,k=3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-entries", type=_positive_int, default=64)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, FormatError, IngestionError, CheckpointError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
