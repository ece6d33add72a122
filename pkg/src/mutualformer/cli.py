"""Command-line entry point: ``mutualformer <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
Every command writes only under ``--out`` and finishes with a manifest.json
listing each written file and its SHA-256.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import bench as benchmod
from .errors import (CheckpointFormatError, ConfigError, MutualFormerError, TrainingDivergedError,
                     UsageError)
from .gradcheck import TOLERANCE, op_suite
from .pipeline import checkpoint as ckpt
from .pipeline import data as sd
from .pipeline import imageio
from .pipeline.model import attention_trace
from .pipeline.train import TrainConfig, eval_csv, evaluate, load_model, held_out_split, train


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


# TrainConfig field -> flag spelling where it differs from --field-name
_FLAG_NAMES = {"lam": "--lambda", "width": "--d"}


def _flag(field: str) -> str:
    return _FLAG_NAMES.get(field, "--" + field.replace("_", "-"))


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser, skip=()):
    for f in dataclasses.fields(TrainConfig):
        if f.name in skip:
            continue
        kind = type(f.default) if not isinstance(f.default, tuple) else tuple
        conv = {bool: _bool, int: int, float: float, str: str, tuple: _int_list}[kind]
        p.add_argument(_flag(f.name), dest=f.name, type=conv, default=argparse.SUPPRESS,
                       help=f"config key '{f.name}' (default {f.default!r})")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--config", help="JSON config file; flags override its values")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mutualformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic RGB-D dataset as PPM/PGM files")
    _common(p)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="dataset seed")
    p.add_argument("--count", type=int, default=argparse.SUPPRESS, help="number of samples")
    p.add_argument("--size", type=int, default=argparse.SUPPRESS, help="image side length")
    p.add_argument("--start", type=int, default=0, help="index of the first sample")

    p = sub.add_parser("train", help="train the saliency network")
    _common(p)
    _add_config_flags(p)
    p.add_argument("--resume", help="continue from a final.mfck checkpoint")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory written by gen-data (default: the config's test split)")
    p.add_argument("--mean-curve", action="store_true", help="F_max from the mean PR curve")
    p.add_argument("--save-maps", action="store_true", help="also write predicted maps as PGM")

    p = sub.add_parser("dump-attn", help="write first-layer similarity matrices as CSV")
    _common(p)
    p.add_argument("--checkpoint", help="trained checkpoint (default: fresh initialisation)")
    _add_config_flags(p, skip=("strategy",))
    p.add_argument("--level", type=int, default=2, help="encoder level 2..5")
    p.add_argument("--index", type=int, default=0, help="synthetic sample index")

    p = sub.add_parser("grad-check", help="finite-difference check of every operation")
    _common(p)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("bench", help="time the CA and CDA similarity steps")
    _common(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--d", type=int, default=1024)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--no-sweep", action="store_true", help="skip the n sweep")
    return parser


# --------------------------------------------------------------------------- helpers

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            values = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(values, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return values


def _train_config(args, forced: dict | None = None) -> TrainConfig:
    values = _load_config(args.config)
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    values.update({k: v for k, v in vars(args).items() if k in fields})
    values.update(forced or {})
    return TrainConfig.from_dict(values)


class _Output:
    """Tracks files written under the output directory."""

    def __init__(self, root: str):
        self.root = root
        self.files: list[str] = []

    def path(self, name: str) -> str:
        full = os.path.join(self.root, name)
        os.makedirs(os.path.dirname(full), exist_ok=True)
        return full

    def write(self, name: str, payload) -> str:
        full = self.path(name)
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        with open(full, "wb") as fh:
            fh.write(payload)
        self.files.append(full)
        return full

    def manifest(self, command: str):
        entries = []
        for full in sorted(set(self.files)):
            with open(full, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            entries.append({"path": os.path.relpath(full, self.root).replace(os.sep, "/"),
                            "sha256": digest})
        body = json.dumps({"command": command, "files": entries}, indent=2, sort_keys=True) + "\n"
        with open(os.path.join(self.root, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(body)


def _matrix_csv(m: np.ndarray) -> str:
    return "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in m)


def _read_dataset(folder: str) -> list:
    names = sorted(f for f in os.listdir(folder) if f.endswith("_mask.pgm"))
    if not names:
        raise UsageError(f"no *_mask.pgm files in {folder}")
    samples = []
    for name in names:
        stem = name[:-len("_mask.pgm")]
        rgb = imageio.read_image(os.path.join(folder, stem + "_rgb.ppm")) / 255.0
        depth = imageio.read_image(os.path.join(folder, stem + "_depth.pgm")) / 255.0
        mask = (imageio.read_image(os.path.join(folder, name)) >= 128).astype(np.uint8)
        index = int(stem.rsplit("_", 1)[-1]) if stem.rsplit("_", 1)[-1].isdigit() else len(samples)
        samples.append(sd.SaliencySample(rgb, depth, mask, index))
    return samples


# --------------------------------------------------------------------------- commands

def cmd_gen_data(args, out: _Output):
    values = _load_config(args.config)
    seed = getattr(args, "seed", values.get("data_seed", 0))
    count = getattr(args, "count", values.get("train_count", 10))
    size = getattr(args, "size", values.get("size", 64))
    for s in sd.synth_dataset(seed, count, size, start=args.start):
        stem = f"sample_{s.index:04d}"
        out.write(f"{stem}_rgb.ppm", imageio.encode(s.rgb))
        out.write(f"{stem}_depth.pgm", imageio.encode(s.depth))
        out.write(f"{stem}_mask.pgm", imageio.encode(s.mask * 255))


def cmd_train(args, out: _Output):
    cfg = _train_config(args)
    resume = ckpt.load(args.resume) if args.resume else None
    os.makedirs(out.root, exist_ok=True)
    out.write("config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    try:
        train(cfg, resume=resume, out_dir=out.root, written=out.files)
    except TrainingDivergedError as exc:
        print(f"epoch {exc.epoch + 1}, batch {exc.batch_id}: {exc}", file=sys.stderr)
        raise


def cmd_eval(args, out: _Output):
    state = ckpt.load(args.checkpoint)
    cfg, tree = load_model(state)
    samples = _read_dataset(args.data) if args.data else held_out_split(cfg)
    rows = evaluate(tree, cfg, samples, mean_curve=args.mean_curve)
    out.write("metrics.csv", eval_csv(rows))
    if args.save_maps:
        from .pipeline.train import predict
        for s, p in zip(samples, predict(tree, cfg, samples, cfg.batch_size)):
            out.write(f"maps/sample_{s.index:04d}_pred.pgm", imageio.encode(p))


def cmd_dump_attn(args, out: _Output):
    if args.checkpoint:
        cfg, tree = load_model(ckpt.load(args.checkpoint))
    else:
        from .pipeline.model import init_model
        cfg = _train_config(args, forced={"strategy": "mutualformer"})
        tree = init_model(cfg.seed, cfg.model_config(), cfg.size)
    sample = sd.synth_sample(cfg.data_seed, args.index, cfg.size, cfg.distractors)
    rgb, depth, _ = sd.stack([sample])
    for name, m in attention_trace(tree, cfg.model_config(), rgb, depth, args.level).items():
        out.write(f"level{args.level}_{name}.csv", _matrix_csv(m))


def cmd_grad_check(args, out: _Output):
    report = op_suite(args.seed)
    lines = ["op,max_relative_error,pass\n"]
    for name, err in report.items():
        lines.append(f"{name},{err:.6e},{int(err < TOLERANCE)}\n")
    out.write("gradcheck.csv", "".join(lines))
    worst = max(report, key=report.get)
    print(f"max relative error {report[worst]:.3e} ({worst}); tolerance {TOLERANCE:g}")
    return 0 if all(v < TOLERANCE for v in report.values()) else 2


def cmd_bench(args, out: _Output):
    if min(args.n, args.d, args.reps) < 1:
        raise UsageError("--n, --d and --reps must be positive")
    rows, crossover = benchmod.run(args.n, args.d, args.reps, args.seed, sweep=not args.no_sweep)
    out.write("bench.csv", benchmod.to_csv(rows, crossover, args.d))
    t = rows[0]
    print(f"n={t['n']} d={t['d']}: CA {t['ca_median_ns'] / 1e3:.1f} us, "
          f"CDA {t['cda_median_ns'] / 1e3:.1f} us; crossover n = {crossover}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "dump-attn": cmd_dump_attn, "grad-check": cmd_grad_check, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    out = _Output(args.out)
    try:
        code = COMMANDS[args.command](args, out) or 0
    except (UsageError, ConfigError) as exc:
        print(f"mutualformer {args.command}: {exc}", file=sys.stderr)
        return 1
    except (MutualFormerError, CheckpointFormatError, OSError, FloatingPointError) as exc:
        print(f"mutualformer {args.command}: {exc}", file=sys.stderr)
        code = 2
    if out.files:
        out.manifest(args.command)
    return code


if __name__ == "__main__":
    sys.exit(main())
