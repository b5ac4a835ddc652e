"""Deconvolution-and-bilinear fusion block.

Each pooled scale is upsampled twice, once by a learned transposed
convolution and once by bilinear interpolation, and the two results are
combined by learned 1×1 convolutions. The scale outputs are summed::

    M = sum_i  Wd_i * deconv_i(f_i)  +  Wb_i * bilinear(f_i)

Per-scale mixing factors are folded into ``Wd_i`` and ``Wb_i``; separate
path and scale weights would not be identifiable.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import (
    Conv2dParams,
    TransposedConv2dParams,
    bilinear_resize,
    conv2d,
    transposed_conv2d,
)
from .tensor import ShapeError, Tensor

__all__ = [
    "DBBlockParams",
    "ScaleParams",
    "bilinear_kernel",
    "deconv_geometry",
    "fuse_multiscale",
    "fuse_scale",
    "init_dbblock",
]

MODES = ("db", "d", "b")


@dataclass
class ScaleParams:
    deconv: TransposedConv2dParams
    weight_d: Conv2dParams
    weight_b: Conv2dParams

    def tensors(self) -> list[Tensor]:
        return self.deconv.tensors() + self.weight_d.tensors() + self.weight_b.tensors()


@dataclass
class DBBlockParams:
    scales: list[ScaleParams]
    target: tuple[int, int]
    mode: str = "db"  # "d" / "b" keep only one upsampling path

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    def tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for s in self.scales:
            if self.mode != "b":
                out += s.deconv.tensors() + s.weight_d.tensors()
            if self.mode != "d":
                out += s.weight_b.tensors()
        return out


def deconv_geometry(size_in: int, size_target: int) -> tuple[int, int, int]:
    """``(kernel, stride, padding)`` upsampling ``size_in`` by an integral factor.

    The factor is ``size_target / size_in`` rounded to the nearest integer;
    output extent is ``size_in * factor`` and is bilinearly trimmed to the
    target afterwards when they differ.
    """
    factor = max(1, int(round(size_target / size_in)))
    kernel = 2 * factor - (factor % 2)
    return kernel, factor, (kernel - factor) // 2


def bilinear_kernel(k: int) -> np.ndarray:
    """1-D taps of the length-``k`` bilinear upsampling filter (FCN-style)."""
    factor = (k + 1) // 2
    center = factor - 1 if k % 2 == 1 else factor - 0.5
    return 1 - np.abs(np.arange(k) - center) / factor


def _one_by_one(weight: np.ndarray) -> Conv2dParams:
    return Conv2dParams(Tensor(weight[:, :, None, None], requires_grad=True), None)


def init_dbblock(
    in_sizes: Sequence[tuple[int, int]],
    channels: int,
    out_channels: int,
    target: tuple[int, int],
    mode: str = "db",
) -> DBBlockParams:
    """Deconvolutions start as per-channel bilinear upsamplers and both 1×1
    weightings as ``0.5 · I``, so the fresh block averages the two paths."""
    scales = []
    for h, w in in_sizes:
        kh, sh, ph = deconv_geometry(h, target[0])
        kw, sw, pw = deconv_geometry(w, target[1])
        kern = np.outer(bilinear_kernel(kh), bilinear_kernel(kw))
        deconv_w = np.zeros((channels, channels, kh, kw))
        deconv_w[np.arange(channels), np.arange(channels)] = kern
        deconv = TransposedConv2dParams(
            Tensor(deconv_w, requires_grad=True), None, (sh, sw), (ph, pw)
        )
        mix = 0.5 * np.eye(out_channels, channels)
        scales.append(ScaleParams(deconv, _one_by_one(mix), _one_by_one(mix.copy())))
    return DBBlockParams(scales, tuple(target), mode)


def _deconv_path(f: Tensor, sp: ScaleParams, target) -> Tensor:
    up = transposed_conv2d(f, sp.deconv)
    if up.shape[2:] != tuple(target):
        up = bilinear_resize(up, *target)
    return conv2d(up, sp.weight_d)


def _bilinear_path(f: Tensor, sp: ScaleParams, target) -> Tensor:
    return conv2d(bilinear_resize(f, *target), sp.weight_b)


def fuse_scale(f: Tensor, sp: ScaleParams, target: tuple[int, int], mode: str = "db") -> Tensor:
    """One scale's block output ``Wd · deconv(f) + Wb · bilinear(f)``."""
    if f.ndim != 4 or f.shape[1] != sp.deconv.weight.shape[0]:
        raise ShapeError(f"feature {f.shape} incompatible with deconv {sp.deconv.weight.shape}")
    if mode == "d":
        return _deconv_path(f, sp, target)
    if mode == "b":
        return _bilinear_path(f, sp, target)
    return _deconv_path(f, sp, target) + _bilinear_path(f, sp, target)


def fuse_multiscale(features: Sequence[Tensor], params: DBBlockParams) -> Tensor:
    """Sum of :func:`fuse_scale` over scales; ``features[i]`` pairs with ``params.scales[i]``."""
    if not features:
        raise ShapeError("fuse_multiscale needs at least one scale")
    if len(features) != len(params.scales):
        raise ShapeError(f"{len(features)} features for {len(params.scales)} scales")
    ref = features[0].shape[:2]
    total = None
    for f, sp in zip(features, params.scales):
        if f.shape[:2] != ref:
            raise ShapeError("all scales must share batch and channel counts")
        h = fuse_scale(f, sp, params.target, params.mode)
        total = h if total is None else total + h
    return total
