"""Differentiable network primitives on NCHW tensors."""
from __future__ import annotations

from dataclasses import dataclass
from math import ceil, floor
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, apply_op, concat

__all__ = [
    "BoundingBox",
    "Conv2dParams",
    "TransposedConv2dParams",
    "bilinear_resize",
    "concat_channels",
    "conv2d",
    "conv_output_extent",
    "crop_spatial",
    "paste_spatial",
    "pool2d",
    "relu",
    "transposed_conv2d",
]


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_extent(size: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (k - 1) - 1) // stride + 1


@dataclass(frozen=True)
class BoundingBox:
    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.top < 0 or self.left < 0:
            raise ShapeError(f"degenerate box {self}")

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def fits(self, h: int, w: int) -> bool:
        return self.bottom <= h and self.right <= w

    @classmethod
    def full(cls, h: int, w: int) -> "BoundingBox":
        return cls(0, 0, h, w)


@dataclass
class Conv2dParams:
    weight: Tensor
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    dilation: tuple[int, int] = (1, 1)

    @classmethod
    def init(cls, rng: np.random.Generator, in_c: int, out_c: int, k: int,
             stride=1, padding=0, dilation=1, bias: bool = True) -> "Conv2dParams":
        std = np.sqrt(2.0 / (in_c * k * k))
        w = Tensor(rng.normal(0.0, std, (out_c, in_c, k, k)), requires_grad=True)
        b = Tensor(np.zeros(out_c), requires_grad=True) if bias else None
        return cls(w, b, _pair(stride), _pair(padding), _pair(dilation))

    def tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


@dataclass
class TransposedConv2dParams:
    weight: Tensor  # inC × outC × kH × kW
    bias: Tensor | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])


# -- raw numpy kernels shared by conv2d and transposed_conv2d --------------

def _windows(xp, kh, kw, stride, dilation, oh, ow):
    sn, sc, sh, sw = xp.strides
    n, c = xp.shape[:2]
    return as_strided(
        xp,
        shape=(n, c, oh, ow, kh, kw),
        strides=(sn, sc, sh * stride[0], sw * stride[1],
                 sh * dilation[0], sw * dilation[1]),
        writeable=False,
    )


def _pad(x, padding):
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _conv_fwd(x, w, stride, padding, dilation):
    kh, kw = w.shape[2:]
    oh = conv_output_extent(x.shape[2], kh, stride[0], padding[0], dilation[0])
    ow = conv_output_extent(x.shape[3], kw, stride[1], padding[1], dilation[1])
    cols = _windows(_pad(x, padding), kh, kw, stride, dilation, oh, ow)
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # n oh ow o
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def _conv_grad_input(gy, w, in_shape, stride, padding, dilation):
    n, c, h, wd = in_shape
    kh, kw = w.shape[2:]
    oh, ow = gy.shape[2:]
    ph, pw = padding
    dcols = np.tensordot(gy, w, axes=([1], [0]))  # n oh ow c kh kw
    dxp = np.zeros((n, c, h + 2 * ph, wd + 2 * pw), dtype=gy.dtype)
    if oh * ow < kh * kw:
        # Few output cells, large kernel: scatter one whole kernel footprint per cell.
        kspan_h = dilation[0] * (kh - 1) + 1
        kspan_w = dilation[1] * (kw - 1) + 1
        for p in range(oh):
            r0 = p * stride[0]
            for q in range(ow):
                c0 = q * stride[1]
                dxp[:, :, r0:r0 + kspan_h:dilation[0], c0:c0 + kspan_w:dilation[1]] += (
                    dcols[:, p, q]
                )
        return dxp[:, :, ph:ph + h, pw:pw + wd]
    rspan = stride[0] * (oh - 1) + 1
    cspan = stride[1] * (ow - 1) + 1
    for i in range(kh):
        r0 = i * dilation[0]
        for j in range(kw):
            c0 = j * dilation[1]
            dxp[:, :, r0:r0 + rspan:stride[0], c0:c0 + cspan:stride[1]] += (
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return dxp[:, :, ph:ph + h, pw:pw + wd]


def _conv_grad_weight(x, gy, kshape, stride, padding, dilation):
    kh, kw = kshape
    oh, ow = gy.shape[2:]
    cols = _windows(_pad(x, padding), kh, kw, stride, dilation, oh, ow)
    gw = np.tensordot(gy, cols, axes=([0, 2, 3], [0, 2, 3]))  # o c kh kw
    return gw


def conv2d(x: Tensor, p: Conv2dParams) -> Tensor:
    """Dilated 2-D cross-correlation."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects N×C×H×W, got {x.shape}")
    w = p.weight
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, weight {w.shape[1]}")
    stride, padding, dilation = _pair(p.stride), _pair(p.padding), _pair(p.dilation)
    for axis in (0, 1):
        extent = conv_output_extent(x.shape[2 + axis], w.shape[2 + axis],
                                    stride[axis], padding[axis], dilation[axis])
        if extent < 1:
            raise ShapeError(f"non-positive conv output extent for input {x.shape}")
    xd, wd = x.data, w.data
    y = _conv_fwd(xd, wd, stride, padding, dilation)
    if p.bias is not None:
        y = y + p.bias.data[None, :, None, None]

    def backward(g):
        gx = _conv_grad_input(g, wd, xd.shape, stride, padding, dilation)
        gw = _conv_grad_weight(xd, g, wd.shape[2:], stride, padding, dilation)
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if p.bias is None else (x, w, p.bias)
    return apply_op(y, inputs, backward)


def transposed_conv2d(x: Tensor, p: TransposedConv2dParams) -> Tensor:
    """Adjoint of :func:`conv2d` with the same geometry; output extent
    ``(in - 1) * stride - 2 * pad + k``."""
    if x.ndim != 4:
        raise ShapeError(f"transposed_conv2d expects N×C×H×W, got {x.shape}")
    w = p.weight
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input {x.shape[1]}, weight {w.shape[0]}")
    stride, padding = _pair(p.stride), _pair(p.padding)
    kh, kw = w.shape[2:]
    oh = (x.shape[2] - 1) * stride[0] - 2 * padding[0] + kh
    ow = (x.shape[3] - 1) * stride[1] - 2 * padding[1] + kw
    if oh < 1 or ow < 1:
        raise ShapeError(f"non-positive transposed conv output extent for {x.shape}")
    out_shape = (x.shape[0], w.shape[1], oh, ow)
    xd, wd = x.data, w.data
    dil = (1, 1)
    y = _conv_grad_input(xd, wd, out_shape, stride, padding, dil)
    if p.bias is not None:
        y = y + p.bias.data[None, :, None, None]

    def backward(g):
        gx = _conv_fwd(g, wd, stride, padding, dil)
        gw = _conv_grad_weight(g, xd, (kh, kw), stride, padding, dil)
        if p.bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, w) if p.bias is None else (x, w, p.bias)
    return apply_op(np.ascontiguousarray(y), inputs, backward)


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    # Corner-aligned: output index 0 -> input 0, output n_out-1 -> input n_in-1.
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    i0 = np.minimum(np.floor(src).astype(int), n_in - 2)
    frac = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - frac
    m[rows, i0 + 1] += frac
    return m.astype(dtype)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resampling of the last two axes."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize target must be positive, got {(out_h, out_w)}")
    if x.ndim != 4:
        raise ShapeError(f"bilinear_resize expects N×C×H×W, got {x.shape}")
    h, w = x.shape[2:]
    if (h, w) == (out_h, out_w):
        return apply_op(x.data.copy(), (x,), lambda g: (g,))
    ah = _interp_matrix(out_h, h, x.dtype)
    aw = _interp_matrix(out_w, w, x.dtype)
    y = ah @ x.data @ aw.T

    def backward(g):
        return (ah.T @ g @ aw,)

    return apply_op(y, (x,), backward)


def _grid_bounds(n: int, g: int) -> list[tuple[int, int]]:
    return [(floor(i * n / g), ceil((i + 1) * n / g)) for i in range(g)]


def pool2d(x: Tensor, mode: str, out_grid: tuple[int, int]) -> Tensor:
    """Adaptive pooling to a fixed ``gH × gW`` grid (avg or max)."""
    gh, gw = _pair(out_grid)
    n, c, h, w = x.shape
    if gh < 1 or gw < 1 or gh > h or gw > w:
        raise ShapeError(f"pool grid {(gh, gw)} invalid for input {h}×{w}")
    if mode not in ("avg", "max"):
        raise ValueError(f"unknown pool mode {mode!r}")
    rows, cols = _grid_bounds(h, gh), _grid_bounds(w, gw)
    xd = x.data
    y = np.empty((n, c, gh, gw), dtype=xd.dtype)
    argmax: dict[tuple[int, int], np.ndarray] = {}
    for a, (r0, r1) in enumerate(rows):
        for b, (c0, c1) in enumerate(cols):
            win = xd[:, :, r0:r1, c0:c1]
            if mode == "avg":
                y[:, :, a, b] = win.mean(axis=(2, 3))
            else:
                flat = win.reshape(n, c, -1)
                idx = flat.argmax(axis=2)
                argmax[a, b] = idx
                y[:, :, a, b] = np.take_along_axis(flat, idx[..., None], 2)[..., 0]

    def backward(g):
        gx = np.zeros_like(xd)
        for a, (r0, r1) in enumerate(rows):
            for b, (c0, c1) in enumerate(cols):
                if mode == "avg":
                    area = (r1 - r0) * (c1 - c0)
                    gx[:, :, r0:r1, c0:c1] += g[:, :, a, b][..., None, None] / area
                else:
                    buf = np.zeros((n, c, (r1 - r0) * (c1 - c0)), dtype=xd.dtype)
                    np.put_along_axis(buf, argmax[a, b][..., None],
                                      g[:, :, a, b][..., None], axis=2)
                    gx[:, :, r0:r1, c0:c1] += buf.reshape(n, c, r1 - r0, c1 - c0)
        return (gx,)

    return apply_op(y, (x,), backward)


def crop_spatial(x: Tensor, box: BoundingBox) -> Tensor:
    h, w = x.shape[2:]
    if not box.fits(h, w):
        raise ShapeError(f"box {box} outside {h}×{w}")
    t, l, b, r = box.top, box.left, box.bottom, box.right
    y = x.data[:, :, t:b, l:r].copy()

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, t:b, l:r] = g
        return (gx,)

    return apply_op(y, (x,), backward)


def paste_spatial(x: Tensor, box: BoundingBox, full_size: tuple[int, int],
                  fill: Sequence[float] | float = 0.0) -> Tensor:
    """Place ``x`` at ``box`` inside a canvas whose other cells hold ``fill``
    (a scalar or one value per channel). Inverse of :func:`crop_spatial`."""
    n, c, bh, bw = x.shape
    h, w = full_size
    if (bh, bw) != (box.height, box.width) or not box.fits(h, w):
        raise ShapeError(f"cannot paste {x.shape} at {box} in {h}×{w}")
    canvas = np.empty((n, c, h, w), dtype=x.dtype)
    canvas[...] = np.asarray(fill, dtype=x.dtype).reshape(-1, 1, 1) if np.ndim(fill) else fill
    t, l = box.top, box.left
    canvas[:, :, t:t + bh, l:l + bw] = x.data
    return apply_op(canvas, (x,), lambda g: (g[:, :, t:t + bh, l:l + bw].copy(),))


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def relu(x: Tensor) -> Tensor:
    return x.relu()
