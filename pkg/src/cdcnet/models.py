"""CDCN backbones, heads, and the three multi-modal fusion strategies.

Layer plan (``C`` = init channels, ``r`` = expand ratio, ``S`` = input size)::

    stem    CDC 3x3 (in -> C), BN, ReLU                         S
    low     [CDC (C -> rC), BN, ReLU, CDC (rC -> C), BN, ReLU], pool   S/2
    mid     same                                                 S/4
    high    same                                                 S/8
    head    concat(levels resized to S/8) -> CDC (L*C -> C), BN, ReLU,
            CDC (C -> 1), sigmoid

With attention enabled every level is reweighted by a spatial map
``sigmoid(conv_k([mean_c(f), max_c(f)]))`` before the concat, k = 7/5/3.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .nn import BatchNorm2d, CdcConv2d, Conv2d, Module
from .tensor import Tensor, amax, concat, maxpool2d, mul, relu, resize, sigmoid

MODALITIES = ("rgb", "depth", "ir")
FUSIONS = ("input", "feature", "score")
ATTENTION_KERNELS = (7, 5, 3)


@dataclass
class ModelConfig:
    theta: float = 0.7
    init_channels: int | None = None
    expand_ratio: float = 2.0
    input_size: int = 256
    modalities: tuple[str, ...] = ("rgb",)
    fusion: str = "feature"
    attention: bool = True
    score_weights: dict[str, float] | None = None
    blocks_per_cell: int = 1
    head_bias: bool = True
    seed: int = 0

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        if not self.modalities:
            raise ValueError("at least one modality is required")
        for m in self.modalities:
            if m not in MODALITIES:
                raise ValueError(f"unknown modality {m!r}; expected one of {MODALITIES}")
        if len(set(self.modalities)) != len(self.modalities):
            raise ValueError(f"duplicate modalities in {self.modalities}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"unknown fusion {self.fusion!r}; expected one of {FUSIONS}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must lie in [0, 1], got {self.theta}")
        if self.input_size < 8 or self.input_size % 8:
            raise ValueError(f"input_size must be a positive multiple of 8, got {self.input_size}")
        if self.init_channels is None:
            self.init_channels = 64 if self.is_feature_fusion else 80
        if self.init_channels < 1:
            raise ValueError("init_channels must be positive")
        wide = self.expand_ratio * self.init_channels
        if self.expand_ratio <= 0 or abs(wide - round(wide)) > 1e-9:
            raise ValueError(
                f"expand_ratio {self.expand_ratio} x {self.init_channels} channels is not an integer"
            )
        if self.blocks_per_cell < 1:
            raise ValueError("blocks_per_cell must be >= 1")
        if self.fusion == "score" and len(self.modalities) > 1:
            if self.score_weights is None:
                self.score_weights = {m: 1.0 / len(self.modalities) for m in self.modalities}
            self.score_weights = {k: float(v) for k, v in self.score_weights.items()}
            unknown = set(self.score_weights) - set(self.modalities)
            if unknown:
                raise ValueError(f"score weights for modalities not in the model: {sorted(unknown)}")
            total = sum(self.score_weights.values())
            if abs(total - 1.0) > 1e-6:
                raise ValueError(f"score weights must sum to 1, got {total}")

    @property
    def multi_modal(self) -> bool:
        return len(self.modalities) > 1

    @property
    def is_feature_fusion(self) -> bool:
        return self.multi_modal and self.fusion == "feature"

    @property
    def mask_size(self) -> int:
        return self.input_size // 8

    @property
    def wide_channels(self) -> int:
        return int(round(self.expand_ratio * self.init_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class LevelFeatures(NamedTuple):
    low: Tensor
    mid: Tensor
    high: Tensor


class CdcBlock(Module):
    """Two stacked CDCs: widen by the expand ratio, then narrow back."""

    def __init__(self, rng, channels, wide, theta):
        self.conv1 = CdcConv2d(rng, channels, wide, theta=theta)
        self.bn1 = BatchNorm2d(wide)
        self.conv2 = CdcConv2d(rng, wide, channels, theta=theta)
        self.bn2 = BatchNorm2d(channels)

    def forward(self, x):
        x = relu(self.bn1(self.conv1(x)))
        return relu(self.bn2(self.conv2(x)))


class Cell(Module):
    def __init__(self, rng, channels, wide, theta, blocks=1):
        self.blocks = [CdcBlock(rng, channels, wide, theta) for _ in range(blocks)]

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return maxpool2d(x, 2, 2)


class Backbone(Module):
    """Stem plus low/mid/high cells; returns the three pooled level maps."""

    def __init__(self, rng, in_channels, cfg: ModelConfig):
        c = cfg.init_channels
        self.in_channels = in_channels
        self.stem = CdcConv2d(rng, in_channels, c, theta=cfg.theta)
        self.stem_bn = BatchNorm2d(c)
        self.cells = [
            Cell(rng, c, cfg.wide_channels, cfg.theta, cfg.blocks_per_cell) for _ in range(3)
        ]

    def forward(self, x: Tensor) -> LevelFeatures:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(f"expected N x {self.in_channels} x S x S input, got {x.shape}")
        x = relu(self.stem_bn(self.stem(x)))
        levels = []
        for cell in self.cells:
            x = cell(x)
            levels.append(x)
        return LevelFeatures(*levels)


class SpatialAttention(Module):
    def __init__(self, rng, k):
        self.conv = Conv2d(rng, 2, 1, k)

    def forward(self, f: Tensor) -> Tensor:
        desc = concat([f.mean(axis=1, keepdims=True), amax(f, 1, keepdims=True)], axis=1)
        return mul(f, sigmoid(self.conv(desc)))


class MultiscaleAttention(Module):
    def __init__(self, rng):
        self.levels = [SpatialAttention(rng, k) for k in ATTENTION_KERNELS]

    def forward(self, feats: LevelFeatures) -> LevelFeatures:
        return LevelFeatures(*(att(f) for att, f in zip(self.levels, feats)))


def attention_refine(f: LevelFeatures, attention: MultiscaleAttention) -> LevelFeatures:
    """Reweight each level by its own mean/max spatial attention map."""
    return attention(f)


def build_backbone(cfg: ModelConfig, rng=None, in_channels: int = 3) -> Backbone:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return Backbone(rng, in_channels, cfg)


class MaskHead(Module):
    def __init__(self, rng, in_channels, channels, theta, bias=True):
        self.conv1 = CdcConv2d(rng, in_channels, channels, theta=theta)
        self.bn1 = BatchNorm2d(channels)
        self.conv2 = CdcConv2d(rng, channels, 1, theta=theta, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        x = relu(self.bn1(self.conv1(x)))
        y = sigmoid(self.conv2(x))
        return y.reshape(y.shape[0], y.shape[2], y.shape[3])


def gather_levels(feats, size: int) -> Tensor:
    """Bilinearly bring every level map to ``size`` and stack along channels."""
    return concat([resize(f, size, size, "bilinear") for f in feats], axis=1)


def _input_of(inputs, modality):
    if isinstance(inputs, Tensor):
        return inputs
    if modality not in inputs:
        raise ValueError(f"missing {modality!r} input")
    x = inputs[modality]
    return x if isinstance(x, Tensor) else Tensor(x)


class SingleModalCDCN(Module):
    """Backbone, optional multiscale attention, and mask head."""

    def __init__(self, cfg: ModelConfig, rng=None, in_channels=3, modality="rgb"):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.modality = modality
        self.backbone = Backbone(rng, in_channels, cfg)
        self.attention = MultiscaleAttention(rng) if cfg.attention else None
        self.head = MaskHead(rng, 3 * cfg.init_channels, cfg.init_channels, cfg.theta, cfg.head_bias)

    @property
    def streams(self) -> tuple[str, ...]:
        return (self.modality,)

    def levels(self, inputs) -> dict[str, LevelFeatures]:
        feats = self.backbone(self._prepare(inputs))
        if self.attention is not None:
            feats = self.attention(feats)
        return {self.modality: feats}

    def _prepare(self, inputs) -> Tensor:
        return _input_of(inputs, self.modality)

    def forward(self, inputs) -> Tensor:
        x = self._prepare(inputs)
        feats = self.levels(x)[self.modality]
        return self.head(gather_levels(feats, x.shape[2] // 8))


class InputFusionCDCN(SingleModalCDCN):
    """Single-modal architecture fed the channel-concat of all modalities."""

    def __init__(self, cfg: ModelConfig, rng=None):
        super().__init__(cfg, rng, in_channels=3 * len(cfg.modalities), modality="fused")

    def _prepare(self, inputs) -> Tensor:
        if isinstance(inputs, Tensor):
            return inputs
        return concat([_input_of(inputs, m) for m in self.cfg.modalities], axis=1)


class FeatureFusionCDCN(Module):
    """Unshared per-modality backbones (no attention), concatenated levels."""

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.branches = {m: Backbone(rng, 3, cfg) for m in cfg.modalities}
        width = 3 * len(cfg.modalities) * cfg.init_channels
        self.head = MaskHead(rng, width, cfg.init_channels, cfg.theta, cfg.head_bias)

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(self.cfg.modalities)

    def levels(self, inputs) -> dict[str, LevelFeatures]:
        return {m: self.branches[m](_input_of(inputs, m)) for m in self.cfg.modalities}

    def forward(self, inputs) -> Tensor:
        feats = self.levels(inputs)
        size = next(iter(feats.values())).low.shape[2] // 4
        return self.head(concat([gather_levels(f, size) for f in feats.values()], axis=1))


class ScoreFusionCDCN(Module):
    """Independent single-modal networks whose masks are averaged with fixed weights.

    The fused mask's mean equals the weighted sum of the branch scores.
    """

    def __init__(self, cfg: ModelConfig, rng=None):
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        self.branches = {m: SingleModalCDCN(cfg, rng, 3, m) for m in cfg.modalities}

    @property
    def streams(self) -> tuple[str, ...]:
        return tuple(self.cfg.modalities)

    def levels(self, inputs) -> dict[str, LevelFeatures]:
        out = {}
        for m, net in self.branches.items():
            out.update(net.levels(inputs))
        return out

    def forward_branches(self, inputs) -> dict[str, Tensor]:
        return {m: net(inputs) for m, net in self.branches.items()}

    def forward(self, inputs) -> Tensor:
        masks = self.forward_branches(inputs)
        weights = self.cfg.score_weights
        fused = None
        for m, mask in masks.items():
            term = mask * weights.get(m, 0.0)
            fused = term if fused is None else fused + term
        return fused


def build_model(cfg: ModelConfig) -> Module:
    if not cfg.multi_modal:
        return SingleModalCDCN(cfg, modality=cfg.modalities[0])
    if cfg.fusion == "input":
        return InputFusionCDCN(cfg)
    if cfg.fusion == "feature":
        return FeatureFusionCDCN(cfg)
    return ScoreFusionCDCN(cfg)


def forward_single(x: Tensor, net: SingleModalCDCN) -> Tensor:
    return net(x)


def forward_multi_feature(x_rgb, x_depth, x_ir, net: FeatureFusionCDCN) -> Tensor:
    return net({"rgb": x_rgb, "depth": x_depth, "ir": x_ir})


def forward_multi_input(x_rgb, x_depth, x_ir, net: InputFusionCDCN) -> Tensor:
    return net({"rgb": x_rgb, "depth": x_depth, "ir": x_ir})


def fuse_scores(scores: dict[str, float], weights: dict[str, float]) -> float:
    """Weighted sum of per-modality scores; weights must sum to one."""
    total = sum(weights.values())
    if abs(total - 1.0) > 1e-6:
        raise ValueError(f"fusion weights must sum to 1, got {total}")
    fused = 0.0
    for m, w in weights.items():
        if w == 0.0:
            continue
        if m not in scores:
            raise ValueError(f"no score for modality {m!r} with weight {w}")
        fused += w * scores[m]
    return fused


def predict_score(mask) -> float:
    """Mean of the predicted mask; higher means more likely live."""
    data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return float(data.mean())


def predict_scores(masks) -> np.ndarray:
    """Per-sample scores for a batch of masks shaped N x H x W."""
    data = masks.data if isinstance(masks, Tensor) else np.asarray(masks)
    return data.reshape(data.shape[0], -1).mean(axis=1).astype(np.float64)
