"""Samples, ground-truth masks, the on-disk dataset layout, and a synthetic generator.

Directory layout::

    root/manifest.csv          id,label,sub_protocol
    root/rgb/<id>.png          8-bit RGB
    root/depth/<id>.png        8-bit grayscale
    root/ir/<id>.png           8-bit grayscale

Single-channel modalities are replicated to three channels on load.
"""
from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

LABELS = ("live", "spoof")
SUB_PROTOCOLS = ("4@1", "4@2", "4@3")
MODALITIES = ("rgb", "depth", "ir")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class SampleRecord:
    id: str
    images: dict[str, np.ndarray]
    label: str
    sub_protocol: str
    mask_gt: np.ndarray

    @property
    def is_live(self) -> bool:
        return self.label == "live"

    @property
    def size(self) -> int:
        return next(iter(self.images.values())).shape[-1]


@dataclass(frozen=True)
class ManifestRow:
    id: str
    label: str
    sub_protocol: str
    paths: dict[str, Path] = field(default_factory=dict)


@dataclass
class DatasetManifest:
    root: Path
    rows: list[ManifestRow]

    def __len__(self):
        return len(self.rows)

    def __post_init__(self):
        seen = set()
        for row in self.rows:
            if row.id in seen:
                raise DatasetError(f"duplicate sample id {row.id!r} in manifest")
            seen.add(row.id)
            if row.label not in LABELS:
                raise DatasetError(f"sample {row.id!r}: unknown label {row.label!r}")
            if row.sub_protocol not in SUB_PROTOCOLS:
                raise DatasetError(f"sample {row.id!r}: unknown sub-protocol {row.sub_protocol!r}")

    @classmethod
    def read(cls, root) -> DatasetManifest:
        root = Path(root)
        path = root / "manifest.csv"
        if not path.exists():
            raise DatasetError(f"no manifest at {path}")
        rows = []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"id", "label", "sub_protocol"} - set(reader.fieldnames or ())
            if missing:
                raise DatasetError(f"{path}: missing columns {sorted(missing)}")
            for r in reader:
                paths = {m: root / m / f"{r['id']}.png" for m in MODALITIES if (root / m).is_dir()}
                rows.append(ManifestRow(r["id"], r["label"], r["sub_protocol"], paths))
        return cls(root, rows)


def block_mean(img: np.ndarray, out_size: int) -> np.ndarray:
    """Area-average an H x W image down to out_size x out_size."""
    h, w = img.shape
    if h % out_size or w % out_size:
        raise ValueError(f"image {h}x{w} is not divisible into {out_size}x{out_size} blocks")
    return img.reshape(out_size, h // out_size, out_size, w // out_size).mean(axis=(1, 3))


def generate_mask(face_image: np.ndarray, label: str, out_size: int) -> np.ndarray:
    """Binary supervision mask: face pixels of live samples are 1, spoofs are all 0."""
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}")
    if label == "spoof":
        return np.zeros((out_size, out_size), dtype=np.float32)
    img = np.asarray(face_image, dtype=np.float64)
    gray = img.mean(axis=0) if img.ndim == 3 else img
    return (block_mean(gray, out_size) > 0).astype(np.float32)


# synthetic data ----------------------------------------------------------


def _smooth_field(rng, yy, xx, terms=3):
    out = np.zeros_like(yy)
    for _ in range(terms):
        fy, fx = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return out / terms


def _synth_sample(rng, size, live):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    cy, cx = rng.uniform(0.42, 0.58, size=2)
    ry, rx = rng.uniform(0.26, 0.36), rng.uniform(0.2, 0.3)
    r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    blob = r2 < 1.0

    colour = rng.uniform(0.45, 0.9, size=3)
    shade = 0.8 + 0.2 * _smooth_field(rng, yy, xx)
    rgb = colour[:, None, None] * shade[None]
    lum = rgb.mean(axis=0)
    if live:
        depth = 0.3 + 0.7 * np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
        ir = 0.85 * lum
    else:
        # recapture artefacts: print texture on RGB, flat depth, noisy IR
        rgb = rgb * (1.0 + 0.35 * rng.uniform(-1.0, 1.0, size=lum.shape))[None]
        depth = np.full_like(lum, rng.uniform(0.4, 0.8))
        ir = np.clip(0.5 * lum + rng.uniform(-0.3, 0.3, size=lum.shape), 0.05, 1.0)
    rgb = np.clip(rgb, 0.02, 1.0) * blob[None]
    depth = depth * blob
    ir = ir * blob
    return {
        "rgb": rgb.astype(np.float32),
        "depth": np.repeat(depth[None], 3, axis=0).astype(np.float32),
        "ir": np.repeat(ir[None], 3, axis=0).astype(np.float32),
    }


def synth_dataset(n_live: int, n_spoof: int, input_size: int = 64, seed: int = 0) -> list[SampleRecord]:
    """Blob "faces" on a black background with modality-dependent liveness cues.

    Live samples have a domed depth map and IR proportional to brightness.
    Spoofs carry zero-mean multiplicative pixel noise in RGB (a print texture
    that leaves the mean colour unchanged), a flat depth plane, and noisy IR.
    Sub-protocol tags cycle through 4@1, 4@2, 4@3 within each class.
    """
    if n_live < 0 or n_spoof < 0:
        raise ValueError("sample counts must be non-negative")
    if input_size % 8:
        raise ValueError(f"input_size must be a multiple of 8, got {input_size}")
    rng = np.random.default_rng(seed)
    records = []
    order = [("live", i) for i in range(n_live)] + [("spoof", i) for i in range(n_spoof)]
    for label, i in order:
        images = _synth_sample(rng, input_size, label == "live")
        records.append(
            SampleRecord(
                id=f"{label}_{i:04d}",
                images=images,
                label=label,
                sub_protocol=SUB_PROTOCOLS[i % len(SUB_PROTOCOLS)],
                mask_gt=generate_mask(images["rgb"], label, input_size // 8),
            )
        )
    return records


# disk I/O ----------------------------------------------------------------


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(records: Iterable[SampleRecord], root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        for m, img in rec.images.items():
            (root / m).mkdir(exist_ok=True)
            if m == "rgb":
                pil = Image.fromarray(to_uint8(img.transpose(1, 2, 0)), "RGB")
            else:
                pil = Image.fromarray(to_uint8(img[0]), "L")
            pil.save(root / m / f"{rec.id}.png")
        rows.append((rec.id, rec.label, rec.sub_protocol))
    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "label", "sub_protocol"])
        writer.writerows(rows)
    return root


def read_image(path: Path, modality: str, input_size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if modality == "rgb" else "L")
            if im.size != (input_size, input_size):
                im = im.resize((input_size, input_size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except FileNotFoundError:
        raise DatasetError(f"missing image file: {path}") from None
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from None
    if modality == "rgb":
        return np.ascontiguousarray(arr.transpose(2, 0, 1))
    return np.repeat(arr[None], 3, axis=0)


def _load_row(row: ManifestRow, modalities, input_size) -> SampleRecord:
    images = {}
    for m in modalities:
        if m not in row.paths:
            raise DatasetError(f"sample {row.id!r} has no {m!r} image")
        images[m] = read_image(row.paths[m], m, input_size)
    face = images["rgb"] if "rgb" in images else next(iter(images.values()))
    return SampleRecord(
        row.id, images, row.label, row.sub_protocol, generate_mask(face, row.label, input_size // 8)
    )


def load_dataset(
    manifest: DatasetManifest,
    input_size: int,
    modalities=("rgb",),
    seed: int | None = None,
    workers: int = 1,
) -> Iterator[SampleRecord]:
    """Decode samples in manifest order (or a seeded shuffle of it).

    Worker threads decode in parallel; the yielded order never depends on
    the worker count.
    """
    if input_size % 8:
        raise ValueError(f"input_size must be a multiple of 8, got {input_size}")
    rows = list(manifest.rows)
    if seed is not None:
        perm = np.random.default_rng(seed).permutation(len(rows))
        rows = [rows[i] for i in perm]
    if workers <= 1:
        for row in rows:
            yield _load_row(row, modalities, input_size)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda r: _load_row(r, modalities, input_size), rows)


def hflip(rec: SampleRecord) -> SampleRecord:
    return replace(
        rec,
        images={m: np.ascontiguousarray(img[..., ::-1]) for m, img in rec.images.items()},
        mask_gt=np.ascontiguousarray(rec.mask_gt[:, ::-1]),
    )


def augment(rec: SampleRecord, rng: np.random.Generator, enabled: bool = True) -> SampleRecord:
    """Random horizontal flip applied to every modality and the mask together."""
    if not enabled:
        return rec
    return hflip(rec) if rng.random() < 0.5 else rec


def collate(records, modalities) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Stack records into per-modality N x 3 x S x S arrays and N x h x w masks."""
    inputs = {}
    for m in modalities:
        missing = [r.id for r in records if m not in r.images]
        if missing:
            raise DatasetError(f"samples {missing} have no {m!r} image")
        inputs[m] = np.stack([r.images[m] for r in records])
    masks = np.stack([r.mask_gt for r in records])
    return inputs, masks
