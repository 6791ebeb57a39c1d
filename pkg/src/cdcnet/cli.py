"""Command-line entry point: ``cdcnet <command> ...``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
training failure.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import DatasetManifest, load_dataset, read_image, synth_dataset, write_dataset
from .metrics import (
    DegenerateProtocolError,
    ScoreRow,
    format_report,
    parse_policy,
    protocol_report,
    read_scores,
    select_threshold,
    write_report,
    write_scores,
)
from .models import ModelConfig, fuse_scores, predict_scores
from .tensor import Tensor, no_grad
from .train import TrainConfig, TrainingError, dump_features, evaluate, train

logger = logging.getLogger("cdcnet")


class UsageError(ValueError):
    """Bad command-line input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# config files ------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_optional(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "null") else conv(text)

    return parse


def _parse_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _parse_weights(text: str) -> dict[str, float]:
    out = {}
    for part in _parse_list(text):
        key, sep, value = part.partition(":")
        if not sep:
            raise ValueError(f"expected modality:weight, got {part!r}")
        out[key.strip()] = float(value)
    return out


_MODEL_KEYS = {
    "theta": float,
    "init_channels": _parse_optional(int),
    "expand_ratio": float,
    "input_size": int,
    "modalities": _parse_list,
    "fusion": str,
    "attention": _parse_bool,
    "score_weights": _parse_optional(_parse_weights),
    "blocks_per_cell": int,
    "head_bias": _parse_bool,
    "seed": int,
}
_TRAIN_KEYS = {
    "lr": float,
    "weight_decay": float,
    "epochs": int,
    "lr_halve_every": int,
    "batch_size": int,
    "seed": int,
    "checkpoint_dir": str,
    "max_steps": _parse_optional(int),
    "save_every": int,
    "augment": _parse_bool,
    "threshold": str,
    "data_dir": _parse_optional(str),
    "dev_dir": _parse_optional(str),
    "workers": int,
}


def parse_config(text: str) -> TrainConfig:
    """Build a TrainConfig from ``key = value`` lines.

    Keys are TrainConfig field names, ModelConfig field names, or ModelConfig
    names prefixed with ``model.``.  A bare ``seed`` sets both seeds; lines
    starting with ``#`` are comments.
    """
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"malformed config: {exc}") from None
    train_kw, model_kw = {}, {}
    for key, raw in parser["config"].items():
        name = key.removeprefix("model.")
        try:
            if key.startswith("model.") or (name in _MODEL_KEYS and name not in _TRAIN_KEYS):
                if name not in _MODEL_KEYS:
                    raise UsageError(f"unknown config key {key!r}")
                model_kw[name] = _MODEL_KEYS[name](raw)
            elif name in _TRAIN_KEYS:
                train_kw[name] = _TRAIN_KEYS[name](raw)
                if name == "seed":
                    model_kw.setdefault("seed", train_kw["seed"])
            else:
                raise UsageError(f"unknown config key {key!r}")
        except UsageError:
            raise
        except ValueError as exc:
            raise UsageError(f"config key {key!r}: {exc}") from None
    return TrainConfig(model=ModelConfig(**model_kw), **train_kw)


def format_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config`."""

    def show(v):
        if isinstance(v, (tuple, list)):
            return ",".join(map(str, v))
        if isinstance(v, dict):
            return ",".join(f"{k}:{w}" for k, w in v.items())
        return "none" if v is None else str(v)

    lines = [f"{f.name} = {show(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg) if f.name != "model"]
    lines += [f"model.{f.name} = {show(getattr(cfg.model, f.name))}" for f in dataclasses.fields(cfg.model)]
    return "\n".join(lines) + "\n"


# commands ----------------------------------------------------------------


def _load_records(root, cfg: ModelConfig, workers=1):
    manifest = DatasetManifest.read(root)
    return list(load_dataset(manifest, cfg.input_size, cfg.modalities, workers=workers))


def cmd_train(args) -> int:
    text = Path(args.config).read_text()
    cfg = parse_config(text)
    overrides = {}
    if args.data:
        overrides["data_dir"] = args.data
    if args.dev:
        overrides["dev_dir"] = args.dev
    if args.out:
        overrides["checkpoint_dir"] = args.out
    cfg = dataclasses.replace(cfg, **overrides)
    if not cfg.data_dir:
        raise UsageError("no training data: set data_dir in the config or pass --data")
    records = _load_records(cfg.data_dir, cfg.model, cfg.workers)
    dev = _load_records(cfg.dev_dir, cfg.model, cfg.workers) if cfg.dev_dir else None
    result = train(cfg, records, dev)
    last = result.epochs[-1]
    print(f"trained {last['steps']} steps, final loss {last['overall']:.6f}")
    print(f"checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    records = _load_records(args.data, model.cfg)
    dev = _load_records(args.dev, model.cfg) if args.dev else None
    report, rows = evaluate(model, records, args.threshold, dev)
    if args.scores:
        write_scores(rows, args.scores)
    if args.report:
        write_report(report, args.report)
    print(format_report(report))
    return 0


def _parse_image_arg(text: str, modalities) -> dict[str, str]:
    if "=" not in text:
        if len(modalities) != 1:
            raise UsageError(
                f"model expects {','.join(modalities)}; pass images as "
                + ",".join(f"{m}=<path>" for m in modalities)
            )
        return {modalities[0]: text}
    paths = {}
    for part in text.split(","):
        m, _, path = part.partition("=")
        paths[m.strip()] = path.strip()
    missing = set(modalities) - set(paths)
    if missing:
        raise UsageError(f"{text!r} lacks modalities {sorted(missing)}")
    return paths


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    kind, threshold = parse_policy(args.threshold)
    if kind != "fixed":
        raise UsageError("predict needs a fixed threshold; data-driven policies need a labelled set")
    samples = [_parse_image_arg(t, cfg.modalities) for t in args.images]
    with no_grad():
        for text, paths in zip(args.images, samples):
            inputs = {
                m: Tensor(read_image(Path(paths[m]), m, cfg.input_size)[None]) for m in cfg.modalities
            }
            score = float(predict_scores(model(inputs))[0])
            label = "live" if score >= threshold else "spoof"
            print(f"{text}\t{score:.6f}\t{label}")
    return 0


def fuse_score_files(paths, weights) -> list[ScoreRow]:
    """Per-sample weighted fusion of score CSVs that cover the same sample ids."""
    if len(paths) != len(weights):
        raise UsageError(f"{len(paths)} score files but {len(weights)} weights")
    tables = [{r.sample_id: r for r in read_scores(p)} for p in paths]
    ids = set(tables[0])
    for p, t in zip(paths[1:], tables[1:]):
        if set(t) != ids:
            diff = sorted(ids ^ set(t))
            raise UsageError(f"{paths[0]} and {p} cover different samples: {diff}")
    keys = [str(i) for i in range(len(paths))]
    wmap = dict(zip(keys, weights))
    fused = []
    for sid, first in tables[0].items():
        for p, t in zip(paths[1:], tables[1:]):
            other = t[sid]
            if (other.label, other.sub_protocol) != (first.label, first.sub_protocol):
                raise UsageError(f"sample {sid!r} has a different label or sub-protocol in {p}")
        scores = {k: t[sid].score for k, t in zip(keys, tables)}
        fused.append(ScoreRow(sid, first.sub_protocol, first.label, fuse_scores(scores, wmap)))
    return fused


def cmd_fuse(args) -> int:
    paths = _parse_list(args.inputs)
    try:
        weights = [float(w) for w in _parse_list(args.weights)]
    except ValueError:
        raise UsageError(f"weights must be numbers, got {args.weights!r}") from None
    rows = fuse_score_files(paths, weights)
    if args.out:
        write_scores(rows, args.out)
    pairs = [(r.score, r.label) for r in rows]
    try:
        threshold = select_threshold(pairs, args.threshold)
        report = protocol_report(rows, threshold)
    except DegenerateProtocolError as exc:
        print(f"fused {len(rows)} samples; no metrics: {exc}")
        return 0
    if args.report:
        write_report(report, args.report)
    print(format_report(report))
    return 0


def cmd_synth(args) -> int:
    records = synth_dataset(args.live, args.spoof, args.size, args.seed)
    root = write_dataset(records, args.out)
    print(f"wrote {len(records)} samples to {root}")
    return 0


def cmd_dump(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data = args.data or (meta.get("train_config") or {}).get("data_dir")
    if not data:
        raise UsageError("no dataset: pass --data (the checkpoint does not record one)")
    manifest = DatasetManifest.read(data)
    rows = [r for r in manifest.rows if r.id == args.sample]
    if not rows:
        raise UsageError(f"sample {args.sample!r} is not in {data}/manifest.csv")
    rec = next(load_dataset(DatasetManifest(manifest.root, rows), model.cfg.input_size, model.cfg.modalities))
    paths = dump_features(model, rec, args.out)
    for p in paths:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cdcnet", description="Central difference convolutional networks for face anti-spoofing.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--data", help="training dataset directory (overrides data_dir)")
    t.add_argument("--dev", help="dev dataset for best-checkpoint selection (overrides dev_dir)")
    t.add_argument("--out", help="checkpoint directory (overrides checkpoint_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a dataset and report APCER/BPCER/ACER")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--threshold", default="fixed:0.5", help="fixed[:t], a number, min_acer, or eer")
    e.add_argument("--dev", help="fit data-driven thresholds on this dataset instead")
    e.add_argument("--scores", help="write per-sample scores CSV here")
    e.add_argument("--report", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="score individual images")
    r.add_argument("--checkpoint", required=True)
    r.add_argument(
        "--image", "--images", dest="images", nargs="+", required=True,
        help="image path, or rgb=a.png,depth=b.png,ir=c.png for multi-modal models",
    )
    r.add_argument("--threshold", default="fixed:0.5", help="fixed threshold for the printed label")
    r.set_defaults(func=cmd_predict)

    f = sub.add_parser("fuse-scores", help="weighted fusion of per-sample score files")
    f.add_argument("--in", dest="inputs", required=True, help="comma-separated score CSVs")
    f.add_argument("--weights", required=True, help="comma-separated weights summing to 1")
    f.add_argument("--out", help="write fused scores CSV here")
    f.add_argument("--threshold", default="fixed:0.5")
    f.add_argument("--report", help="write the JSON report here")
    f.set_defaults(func=cmd_fuse)

    s = sub.add_parser("synth-data", help="write a synthetic multi-modal dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--live", type=int, default=8)
    s.add_argument("--spoof", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=64)
    s.set_defaults(func=cmd_synth)

    d = sub.add_parser("dump-features", help="save level feature maps and the mask of one sample")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--sample", required=True, help="sample id from the manifest")
    d.add_argument("--data", help="dataset directory (default: the one the model was trained on)")
    d.add_argument("--out", default="features")
    d.set_defaults(func=cmd_dump)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (TrainingError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
