"""Multi-scale dual-branch parsing network.

Dataflow: a plain convolutional backbone (dilated late stages) feeds a mask
branch that segments background / left hand / right hand at input
resolution. The posterior locates the hand and is fused as prior channels
into the parsing branch, which crops the hand region from the aggregated
stage features, resizes it to a fixed square, pyramid-pools it, fuses the
scales with the DB-Block, classifies the parts and pastes the result back
into the full frame.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from math import ceil, floor
from typing import Sequence

import numpy as np

from .dbblock import DBBlockParams, init_dbblock, fuse_multiscale
from .nn import (
    BoundingBox,
    Conv2dParams,
    TransposedConv2dParams,
    bilinear_resize,
    concat_channels,
    conv2d,
    crop_spatial,
    paste_spatial,
    pool2d,
    transposed_conv2d,
)
from .tensor import ShapeError, Tensor, concat, softmax_channelwise

__all__ = [
    "MSDBModel",
    "ModelConfig",
    "feature_box",
    "locate_hand",
    "reconstruct_full",
]


def _tuple(v):
    if isinstance(v, (list, tuple)):
        return tuple(_tuple(x) for x in v)
    return v


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 3
    stage_widths: tuple[int, ...] = (8, 16, 16, 16)
    stage_strides: tuple[int, ...] = (4, 8, 8, 8)  # cumulative, per stage
    dilations: tuple[int, ...] = (1, 2, 4)  # stages 2-4
    num_parse_classes: int = 7
    num_seg_classes: int = 3
    crop_size: int = 32
    # The common (1, 2, 3, 6) pyramid; any grids no larger than the crop work.
    pool_grids: tuple[tuple[int, int], ...] = ((1, 1), (2, 2), (3, 3), (6, 6))
    agg_channels: int = 16
    fused_channels: int = 16
    mask_width: int = 16
    upsample: str = "db"  # db | d | b
    parsing_branch: bool = True
    mask_branch: bool = True
    prior_fusion: str = "concat"  # concat | add
    loc_threshold: float = 0.3
    loc_margin: float = 0.25
    background_logit: float = 10.0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            object.__setattr__(self, f.name, _tuple(getattr(self, f.name)))
        self.validate()

    def validate(self) -> None:
        if len(self.stage_widths) != 4 or len(self.stage_strides) != 4:
            raise ValueError("backbone needs exactly four stages")
        if len(self.dilations) != 3:
            raise ValueError("dilations cover stages 2-4")
        s = self.stage_strides
        if not (s[1] == s[2] == s[3]):
            raise ValueError("stages 2-4 must share one resolution (use dilation)")
        prev = 1
        for stride in s:
            if stride % prev or stride // prev not in (1, 2, 4):
                raise ValueError(f"stage strides {s} must grow by factors of 1, 2 or 4")
            prev = stride
        h, w = self.input_size
        if h % s[3] or w % s[3]:
            raise ValueError(f"input {self.input_size} not divisible by stride {s[3]}")
        for gh, gw in self.pool_grids:
            if gh > self.crop_size or gw > self.crop_size:
                raise ValueError(f"pool grid {(gh, gw)} exceeds crop size {self.crop_size}")
        if self.upsample not in ("db", "d", "b"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        if self.prior_fusion not in ("concat", "add"):
            raise ValueError(f"unknown prior fusion {self.prior_fusion!r}")
        if self.mask_branch and not self.parsing_branch:
            raise ValueError("the mask branch only feeds the parsing branch")

    @property
    def feature_size(self) -> tuple[int, int]:
        return self.input_size[0] // self.stage_strides[3], self.input_size[1] // self.stage_strides[3]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def locate_hand(seg_posterior, margin: float = 0.25, threshold: float = 0.3) -> list[BoundingBox]:
    """Tight box around pixels whose non-background posterior exceeds ``threshold``,
    grown by ``margin`` of its extent per side and clipped. Falls back to the
    full frame when no pixel qualifies."""
    post = seg_posterior.data if isinstance(seg_posterior, Tensor) else np.asarray(seg_posterior)
    n, _, h, w = post.shape
    boxes = []
    for i in range(n):
        hand = (1.0 - post[i, 0]) > threshold
        if not hand.any():
            boxes.append(BoundingBox.full(h, w))
            continue
        rows = np.flatnonzero(hand.any(axis=1))
        cols = np.flatnonzero(hand.any(axis=0))
        top, bottom = rows[0], rows[-1] + 1
        left, right = cols[0], cols[-1] + 1
        dy = int(round(margin * (bottom - top)))
        dx = int(round(margin * (right - left)))
        top, bottom = max(0, top - dy), min(h, bottom + dy)
        left, right = max(0, left - dx), min(w, right + dx)
        boxes.append(BoundingBox(int(top), int(left), int(bottom - top), int(right - left)))
    return boxes


def feature_box(box: BoundingBox, full_size, feat_size) -> BoundingBox:
    """Smallest feature-grid box covering an image-space box."""
    H, W = full_size
    h, w = feat_size
    top = floor(box.top * h / H)
    left = floor(box.left * w / W)
    bottom = min(h, ceil(box.bottom * h / H))
    right = min(w, ceil(box.right * w / W))
    return BoundingBox(top, left, max(1, bottom - top), max(1, right - left))


def _image_box(fbox: BoundingBox, full_size, feat_size) -> BoundingBox:
    sy, sx = full_size[0] // feat_size[0], full_size[1] // feat_size[1]
    return BoundingBox(fbox.top * sy, fbox.left * sx, fbox.height * sy, fbox.width * sx)


def reconstruct_full(crop_logits: Tensor, boxes: Sequence[BoundingBox], full_size,
                     background_logit: float = 10.0) -> Tensor:
    """Resize each crop's logits to its box and paste into a frame whose other
    cells hold the background-certain vector ``(K, 0, ..., 0)``."""
    n, c = crop_logits.shape[:2]
    if len(boxes) != n:
        raise ShapeError(f"{len(boxes)} boxes for batch of {n}")
    fill = np.zeros(c)
    fill[0] = background_logit
    out = []
    for i, box in enumerate(boxes):
        if not box.fits(*full_size):
            raise ShapeError(f"box {box} outside frame {full_size}")
        item = bilinear_resize(crop_logits[i:i + 1], box.height, box.width)
        out.append(paste_spatial(item, box, full_size, fill))
    return concat(out, axis=0)


def _stage_conv_strides(ratio: int) -> tuple[int, int]:
    return {1: (1, 1), 2: (2, 1), 4: (2, 2)}[ratio]


class MSDBModel:
    """Parameters and forward passes; component presence follows the config."""

    def __init__(self, config: ModelConfig):
        self.config = cfg = config
        rng = np.random.default_rng(cfg.seed)
        self.params: dict[str, Tensor] = {}
        self.completed_stages: set[int] = set()

        self.backbone: list[list[Conv2dParams]] = []
        in_c, prev = cfg.in_channels, 1
        for k, (width, stride) in enumerate(zip(cfg.stage_widths, cfg.stage_strides)):
            d = 1 if k == 0 else cfg.dilations[k - 1]
            s1, s2 = _stage_conv_strides(stride // prev)
            convs = [
                Conv2dParams.init(rng, in_c, width, 3, stride=s1,
                                  padding=1 if s1 > 1 else d, dilation=1 if s1 > 1 else d),
                Conv2dParams.init(rng, width, width, 3, stride=s2,
                                  padding=1 if s2 > 1 else d, dilation=1 if s2 > 1 else d),
            ]
            self.backbone.append(convs)
            for j, p in enumerate(convs):
                self._register(f"backbone.stage{k + 1}.conv{j + 1}", p)
            in_c, prev = width, stride

        if cfg.mask_branch:
            mw = cfg.mask_width
            self.mask_convs = [Conv2dParams.init(rng, cfg.stage_widths[3], mw, 3, padding=1)]
            self.mask_convs += [Conv2dParams.init(rng, mw, mw, 3, padding=1) for _ in range(3)]
            std = np.sqrt(2.0 / (mw * 16))
            self.mask_up = TransposedConv2dParams(
                Tensor(rng.normal(0, std, (mw, mw, 4, 4)), requires_grad=True),
                Tensor(np.zeros(mw), requires_grad=True), (2, 2), (1, 1))
            self.mask_head = Conv2dParams.init(rng, mw, cfg.num_seg_classes, 1)
            for j, p in enumerate(self.mask_convs):
                self._register(f"mask.conv{j + 1}", p)
            self._register("mask.deconv", self.mask_up)
            self._register("mask.head", self.mask_head)

        if cfg.parsing_branch:
            self.aggregate = [Conv2dParams.init(rng, cfg.stage_widths[k], cfg.agg_channels, 1)
                              for k in (1, 2, 3)]
            for k, p in enumerate(self.aggregate):
                self._register(f"parse.aggregate{k + 2}", p)
            proj_in = cfg.agg_channels
            if cfg.mask_branch and cfg.prior_fusion == "concat":
                proj_in += cfg.num_seg_classes
            if cfg.mask_branch and cfg.prior_fusion == "add":
                self.prior_proj = Conv2dParams.init(rng, cfg.num_seg_classes, cfg.agg_channels, 1)
                self._register("parse.prior", self.prior_proj)
            self.proj = Conv2dParams.init(rng, proj_in, cfg.fused_channels, 1)
            self._register("parse.proj", self.proj)
            S = cfg.crop_size
            self.dbblock: DBBlockParams = init_dbblock(
                cfg.pool_grids, cfg.fused_channels, cfg.fused_channels, (S, S), cfg.upsample)
            for i, sp in enumerate(self.dbblock.scales):
                if cfg.upsample != "b":
                    self._register(f"parse.db{i + 1}.deconv", sp.deconv)
                    self._register(f"parse.db{i + 1}.weight_d", sp.weight_d)
                if cfg.upsample != "d":
                    self._register(f"parse.db{i + 1}.weight_b", sp.weight_b)
            self.classifier = Conv2dParams.init(rng, cfg.fused_channels, cfg.num_parse_classes, 1)
            self._register("parse.classifier", self.classifier)
        else:
            self.fcn_head = Conv2dParams.init(rng, cfg.stage_widths[3], cfg.num_parse_classes, 1)
            self._register("fcn.head", self.fcn_head)

    def _register(self, prefix: str, p) -> None:
        self.params[f"{prefix}.weight"] = p.weight
        if p.bias is not None:
            self.params[f"{prefix}.bias"] = p.bias

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(k, v) for k, v in self.params.items() if k.startswith(prefix)]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for name, t in self.params.items():
            if arrays[name].shape != t.shape:
                raise ShapeError(f"{name}: {arrays[name].shape} != {t.shape}")
            t.data[...] = arrays[name]

    # -- forward passes --------------------------------------------------
    def backbone_forward(self, image: Tensor) -> list[Tensor]:
        cfg = self.config
        if image.ndim != 4 or image.shape[1:] != (cfg.in_channels, *cfg.input_size):
            raise ShapeError(f"image {image.shape} does not match config {cfg.input_size}")
        x, stages = image, []
        for convs in self.backbone:
            for p in convs:
                x = conv2d(x, p).relu()
            stages.append(x)
        return stages

    def mask_branch_forward(self, stage4: Tensor) -> Tensor:
        """Five convolutions, one transposed convolution, one resize."""
        x = stage4
        for p in self.mask_convs:
            x = conv2d(x, p).relu()
        x = transposed_conv2d(x, self.mask_up).relu()
        x = conv2d(x, self.mask_head)
        return bilinear_resize(x, *self.config.input_size)

    def parsing_branch_forward(self, stages: Sequence[Tensor], seg_posterior: Tensor | None,
                               boxes: Sequence[BoundingBox]) -> Tensor:
        """Crop logits ``N × C_p × S × S``; ``boxes`` are in feature-grid units."""
        cfg = self.config
        agg = None
        for st, p in zip(stages[1:], self.aggregate):
            y = conv2d(st, p)
            agg = y if agg is None else agg + y
        agg = agg.relu()
        hf, wf = agg.shape[2:]
        if cfg.mask_branch:
            if seg_posterior is None:
                raise ShapeError("mask prior required when the mask branch is enabled")
            # The prior is a fixed input here: no parsing gradient reaches the mask branch.
            prior = bilinear_resize(seg_posterior.detach(), hf, wf)
            if cfg.prior_fusion == "concat":
                agg = concat_channels([agg, prior])
            else:
                agg = agg + conv2d(prior, self.prior_proj)
        if len(boxes) != agg.shape[0]:
            raise ShapeError(f"{len(boxes)} boxes for batch of {agg.shape[0]}")
        S = cfg.crop_size
        crops = [bilinear_resize(crop_spatial(agg[i:i + 1], box), S, S)
                 for i, box in enumerate(boxes)]
        x = conv2d(concat(crops, axis=0), self.proj).relu()
        pooled = [pool2d(x, "avg", g) for g in cfg.pool_grids]
        fused = fuse_multiscale(pooled, self.dbblock) + x
        return conv2d(fused, self.classifier)

    def forward(self, image: Tensor) -> tuple[Tensor | None, Tensor]:
        """``(seg_logits, parse_logits)`` at input resolution; ``seg_logits`` is
        ``None`` without a mask branch."""
        cfg = self.config
        n = image.shape[0]
        stages = self.backbone_forward(image)
        if not cfg.parsing_branch:
            logits = conv2d(stages[3], self.fcn_head)
            return None, bilinear_resize(logits, *cfg.input_size)
        seg_logits = posterior = None
        if cfg.mask_branch:
            seg_logits = self.mask_branch_forward(stages[3])
            posterior = softmax_channelwise(seg_logits)
            boxes = locate_hand(posterior, cfg.loc_margin, cfg.loc_threshold)
        else:
            boxes = [BoundingBox.full(*cfg.input_size)] * n
        fsize = cfg.feature_size
        fboxes = [feature_box(b, cfg.input_size, fsize) for b in boxes]
        crop_logits = self.parsing_branch_forward(stages, posterior, fboxes)
        iboxes = [_image_box(b, cfg.input_size, fsize) for b in fboxes]
        parse = reconstruct_full(crop_logits, iboxes, cfg.input_size, cfg.background_logit)
        return seg_logits, parse

    __call__ = forward

    def predict(self, image: Tensor) -> tuple[np.ndarray | None, np.ndarray]:
        seg, parse = self.forward(image)
        return (None if seg is None else seg.data.argmax(axis=1)), parse.data.argmax(axis=1)
