"""Adam training loop, evaluation, and feature dumps."""
from __future__ import annotations

import json
import logging
import math
import queue
import threading
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SUB_PROTOCOLS, SampleRecord, augment, collate, to_uint8
from .losses import LossReport, overall_loss
from .metrics import (
    ScoreRow,
    compute_metrics,
    confusion,
    protocol_report,
    select_threshold,
)
from .models import ModelConfig, ScoreFusionCDCN, build_model, predict_scores
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    epochs: int = 50
    lr_halve_every: int = 20
    batch_size: int = 8
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    checkpoint_dir: str = "checkpoints"
    max_steps: int | None = None
    save_every: int = 1
    augment: bool = False
    threshold: str = "fixed:0.5"
    data_dir: str | None = None
    dev_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_halve_every < 1:
            raise ValueError(f"lr_halve_every must be >= 1, got {self.lr_halve_every}")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")


# optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> AdamState:
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def lr_at(epoch: int, lr: float, halve_every: int) -> float:
    return lr * 0.5 ** (epoch // halve_every)


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    lr_t: float,
    weight_decay: float = 0.0,
    names: Sequence[str] | None = None,
) -> None:
    """Bias-corrected Adam with weight decay folded into the gradient (L2 form)."""
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            name = names[i] if names is not None else f"#{i}"
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise TrainingError(f"non-finite gradient in parameter {name} ({bad} entries)")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr_t * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


# batching ----------------------------------------------------------------


def prefetch(items: Iterable, capacity: int) -> Iterator:
    """Run ``items`` on a worker thread behind a bounded queue; order is kept."""
    q: queue.Queue = queue.Queue(maxsize=max(1, capacity))
    done = object()
    stop = threading.Event()

    def worker():
        try:
            for item in items:
                while not stop.is_set():
                    try:
                        q.put((item, None), timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # noqa: BLE001
            q.put((None, exc))
            return
        q.put((done, None))

    t = threading.Thread(target=worker, daemon=True)
    t.start()
    try:
        while True:
            item, exc = q.get()
            if exc is not None:
                raise exc
            if item is done:
                return
            yield item
    finally:
        stop.set()


def _epoch_samples(records, rng, use_augment):
    order = rng.permutation(len(records))
    for i in order:
        yield augment(records[i], rng, use_augment)


def _batches(samples: Iterator[SampleRecord], size: int) -> Iterator[list[SampleRecord]]:
    batch = []
    for s in samples:
        batch.append(s)
        if len(batch) == size:
            yield batch
            batch = []
    if batch:
        yield batch


def _to_tensors(inputs, dtype):
    return {m: Tensor(a.astype(dtype, copy=False)) for m, a in inputs.items()}


def batch_loss(model, inputs, masks) -> tuple[Tensor, LossReport]:
    """Training objective; score-fusion branches are supervised independently."""
    gt = Tensor(masks.astype(model.dtype, copy=False))
    if isinstance(model, ScoreFusionCDCN):
        total, mse, cdl = None, 0.0, 0.0
        for pred in model.forward_branches(inputs).values():
            t, rep = overall_loss(pred, gt)
            total = t if total is None else total + t
            mse += rep.mse
            cdl += rep.cdl
        return total, LossReport(mse, cdl, mse + cdl)
    return overall_loss(model(inputs), gt)


# training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    checkpoint: Path | None
    epochs: list[dict]
    steps: list[LossReport]


def _check_data(records, cfg: TrainConfig):
    if not records:
        raise TrainingError("training set is empty")
    labels = {r.label for r in records}
    if labels != {"live", "spoof"}:
        raise TrainingError(f"training set needs both classes, got {sorted(labels)}")
    for r in records:
        missing = set(cfg.model.modalities) - set(r.images)
        if missing:
            raise TrainingError(f"sample {r.id!r} lacks modalities {sorted(missing)} required by the model")
        if r.size != cfg.model.input_size:
            raise TrainingError(
                f"sample {r.id!r} is {r.size}px but the model expects {cfg.model.input_size}px"
            )


def train(
    cfg: TrainConfig,
    records: Sequence[SampleRecord],
    dev_records: Sequence[SampleRecord] | None = None,
    model=None,
) -> TrainResult:
    records = list(records)
    _check_data(records, cfg)
    out_dir = Path(cfg.checkpoint_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise TrainingError(f"checkpoint directory {out_dir} is not writable: {exc}") from None

    model = build_model(cfg.model) if model is None else model
    model.train()
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    params = [p for _, p in named]
    state = AdamState.for_params(params)
    rng = np.random.default_rng(cfg.seed)
    dtype = model.dtype

    run = train_config_dict(cfg)
    epochs, steps = [], []
    best_acer, best_path = math.inf, None
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    step = 0
    for epoch in range(cfg.epochs):
        lr_t = lr_at(epoch, cfg.lr, cfg.lr_halve_every)
        reports = []
        samples = prefetch(_epoch_samples(records, rng, cfg.augment), 2 * cfg.batch_size)
        for batch in _batches(samples, cfg.batch_size):
            inputs, masks = collate(batch, cfg.model.modalities)
            loss, rep = batch_loss(model, _to_tensors(inputs, dtype), masks)
            model.zero_grad()
            loss.backward()
            adam_step(params, [p.grad for p in params], state, lr_t, cfg.weight_decay, names)
            reports.append(rep)
            steps.append(rep)
            step += 1
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
        entry = {
            "epoch": epoch,
            "lr": lr_t,
            "steps": step,
            "mse": float(np.mean([r.mse for r in reports])),
            "cdl": float(np.mean([r.cdl for r in reports])),
            "overall": float(np.mean([r.overall for r in reports])),
        }
        if dev_records:
            rows = score_records(model, dev_records)
            model.train()
            pairs = [(r.score, r.label) for r in rows]
            t = select_threshold(pairs, cfg.threshold)
            m = compute_metrics(confusion(pairs, t), t)
            entry.update(dev_apcer=m.apcer, dev_bpcer=m.bpcer, dev_acer=m.acer, dev_threshold=t)
            if m.acer < best_acer:
                best_acer = m.acer
                best_path = save_checkpoint(
                    model, out_dir / "best.ckpt", {"epoch": epoch, "dev_acer": m.acer, "train_config": run}
                )
        if cfg.save_every and (epoch + 1) % cfg.save_every == 0:
            save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.ckpt", {"epoch": epoch, "train_config": run})
        epochs.append(entry)
        with open(log_path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")
        logger.info("epoch %d lr %.2e loss %.5f", epoch, lr_t, entry["overall"])
        if cfg.max_steps is not None and step >= cfg.max_steps:
            break

    final = save_checkpoint(
        model, out_dir / "final.ckpt", {"epoch": epochs[-1]["epoch"], "steps": step, "train_config": run}
    )
    model.eval()
    return TrainResult(model, best_path or final, epochs, steps)


# evaluation --------------------------------------------------------------


def score_records(model, records: Sequence[SampleRecord], batch_size: int = 16) -> list[ScoreRow]:
    """Mean-of-mask scores in eval mode."""
    model.eval()
    modalities = model.cfg.modalities
    rows = []
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = list(records[start : start + batch_size])
            inputs, _ = collate(chunk, modalities)
            scores = predict_scores(model(_to_tensors(inputs, model.dtype)))
            rows.extend(ScoreRow(r.id, r.sub_protocol, r.label, float(s)) for r, s in zip(chunk, scores))
    return rows


def evaluate(
    model_or_checkpoint,
    records: Sequence[SampleRecord],
    threshold_policy="fixed:0.5",
    dev_records: Sequence[SampleRecord] | None = None,
) -> tuple[dict, list[ScoreRow]]:
    """Score ``records`` and build the per-sub-protocol report.

    Data-driven threshold policies are fitted on ``dev_records`` when given,
    otherwise on the evaluated set itself.
    """
    model = model_or_checkpoint
    if isinstance(model_or_checkpoint, (str, Path)):
        model, _ = load_checkpoint(model_or_checkpoint)
    unknown = sorted({r.sub_protocol for r in records} - set(SUB_PROTOCOLS))
    if unknown:
        raise ValueError(f"unknown sub-protocol tags {unknown}")
    rows = score_records(model, records)
    fit_rows = score_records(model, dev_records) if dev_records else rows
    threshold = select_threshold([(r.score, r.label) for r in fit_rows], threshold_policy)
    return protocol_report(rows, threshold), rows


# feature visualisation ---------------------------------------------------


def _save_gray(arr: np.ndarray, path: Path, normalise: bool) -> Path:
    a = np.asarray(arr, dtype=np.float64)
    if normalise:
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
    Image.fromarray(to_uint8(a), "L").save(path)
    return path


def dump_features(model, sample: SampleRecord, out_dir) -> list[Path]:
    """Channel-mean level maps (min-max scaled) and the raw predicted mask as PNGs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model.eval()
    inputs, _ = collate([sample], model.cfg.modalities)
    tensors = _to_tensors(inputs, model.dtype)
    paths = []
    with no_grad():
        levels = model.levels(tensors)
        for stream, feats in levels.items():
            for level, f in zip(("low", "mid", "high"), feats):
                path = out_dir / f"{sample.id}_{stream}_{level}.png"
                paths.append(_save_gray(f.data[0].mean(axis=0), path, True))
        mask = model(tensors).data[0]
    paths.append(_save_gray(mask, out_dir / f"{sample.id}_mask.png", False))
    return paths


def train_config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["model"] = cfg.model.to_dict()
    return d
