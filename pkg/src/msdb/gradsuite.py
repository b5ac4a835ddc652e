"""Finite-difference checks for every differentiable primitive.

Each case builds, from a random generator, a scalar function and the point at
which its gradient is checked. Scalar outputs are a random weighting of the
primitive's output so that no gradient is trivially uniform.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .dbblock import fuse_multiscale, init_dbblock
from .losses import (
    LossConfig,
    cross_entropy,
    focal_loss,
    mcb_focal_loss,
    one_hot,
    segmentation_loss,
)
from .model import ModelConfig, MSDBModel, feature_box, locate_hand
from .nn import (
    Conv2dParams,
    TransposedConv2dParams,
    bilinear_resize,
    conv2d,
    pool2d,
    relu,
    transposed_conv2d,
)
from .tensor import Tensor, grad_check, precision, softmax_channelwise

Case = Callable[[np.random.Generator], tuple[Callable[[Tensor], Tensor], np.ndarray]]


def _weighted(rng, shape):
    r = rng.normal(size=shape)
    return lambda y: (y * Tensor(r)).sum()


def _conv_geometry(rng):
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    dilation = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 3))
    return k, stride, pad, dilation


def conv2d_input(rng):
    k, s, p, d = _conv_geometry(rng)
    w = rng.normal(size=(3, 2, k, k))
    b = rng.normal(size=3)
    x = rng.normal(size=(1, 2, 7, 7))
    out = conv2d(Tensor(x), Conv2dParams(Tensor(w), Tensor(b), (s, s), (p, p), (d, d)))
    score = _weighted(rng, out.shape)
    return (lambda t: score(conv2d(t, Conv2dParams(Tensor(w), Tensor(b), (s, s), (p, p), (d, d))))), x


def conv2d_weight(rng):
    k, s, p, d = _conv_geometry(rng)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, k, k))
    out = conv2d(Tensor(x), Conv2dParams(Tensor(w), None, (s, s), (p, p), (d, d)))
    score = _weighted(rng, out.shape)
    return (lambda t: score(conv2d(Tensor(x), Conv2dParams(t, None, (s, s), (p, p), (d, d))))), w


def transposed_input(rng):
    k, s, p = int(rng.integers(2, 5)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    w = rng.normal(size=(2, 3, k, k))
    x = rng.normal(size=(1, 2, 4, 4))
    params = lambda: TransposedConv2dParams(Tensor(w), Tensor(np.ones(3)), (s, s), (p, p))
    score = _weighted(rng, transposed_conv2d(Tensor(x), params()).shape)
    return (lambda t: score(transposed_conv2d(t, params()))), x


def transposed_weight(rng):
    k, s, p = int(rng.integers(2, 5)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 2, 3, 3))
    w = rng.normal(size=(2, 3, k, k))
    out = transposed_conv2d(Tensor(x), TransposedConv2dParams(Tensor(w), None, (s, s), (p, p)))
    score = _weighted(rng, out.shape)
    return (lambda t: score(transposed_conv2d(Tensor(x), TransposedConv2dParams(t, None, (s, s), (p, p))))), w


def bilinear(rng):
    h, w = rng.integers(1, 6, 2)
    oh, ow = rng.integers(1, 9, 2)
    x = rng.normal(size=(1, 2, h, w))
    score = _weighted(rng, (1, 2, oh, ow))
    return (lambda t: score(bilinear_resize(t, int(oh), int(ow)))), x


def _pool(mode):
    def case(rng):
        h, w = rng.integers(3, 8, 2)
        gh, gw = int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1))
        x = rng.normal(size=(1, 2, h, w))
        score = _weighted(rng, (1, 2, gh, gw))
        return (lambda t: score(pool2d(t, mode, (gh, gw)))), x
    return case


def relu_case(rng):
    # Keep clear of the kink so central differences stay one-sided-free.
    x = rng.choice([-1.0, 1.0], size=(1, 2, 4, 4)) * rng.uniform(0.1, 1.0, (1, 2, 4, 4))
    score = _weighted(rng, x.shape)
    return (lambda t: score(relu(t))), x


def softmax_case(rng):
    x = rng.normal(size=(4, 3, 3))
    score = _weighted(rng, x.shape)
    return (lambda t: score(softmax_channelwise(t))), x


def _simplex_rows(rng, n, c):
    return rng.uniform(0.05, 0.95, size=(n, c))


def ce_case(rng):
    n, c = 12, 4
    labels = one_hot(rng.integers(0, c, n), c)
    return (lambda t: cross_entropy(t, labels)), _simplex_rows(rng, n, c)


def fl_case(rng):
    n, c = 12, 4
    labels = one_hot(rng.integers(0, c, n), c)
    cfg = LossConfig(gamma=2.0, alpha_t=float(rng.uniform(0.25, 1.0)))
    return (lambda t: focal_loss(t, labels, cfg)), _simplex_rows(rng, n, c)


def mcb_case(rng):
    n, c = 12, 4
    ids = rng.integers(0, c, n)
    labels = one_hot(ids, c)
    ratios = np.bincount(ids, minlength=c) / n
    cfg = LossConfig(alpha=3.0, gamma=2.0)
    return (lambda t: mcb_focal_loss(t, labels, ratios, cfg)), _simplex_rows(rng, n, c)


def mcb_logits_case(rng):
    labels = rng.integers(0, 3, (2, 4, 4))
    x = rng.normal(size=(2, 3, 4, 4))
    return (lambda t: segmentation_loss(t, labels, "mcb-fl", LossConfig())), x


def dbblock_case(rng):
    c = 2
    grids = [(1, 1), (2, 2), (3, 3)]
    x = rng.normal(size=(1, c, 6, 6))
    params = init_dbblock(grids, c, c, (6, 6))
    for sp in params.scales:
        for p in (sp.deconv.weight, sp.weight_d.weight, sp.weight_b.weight):
            p.data = p.data + rng.normal(0, 0.3, p.shape).astype(p.dtype)
    score = _weighted(rng, (1, c, 6, 6))
    return (lambda t: score(fuse_multiscale([pool2d(t, "avg", g) for g in grids], params))), x


_TINY = ModelConfig(input_size=(32, 32), stage_widths=(4, 6, 6, 6), agg_channels=4,
                    fused_channels=4, mask_width=4, crop_size=8,
                    pool_grids=((1, 1), (2, 2), (3, 3)), num_parse_classes=5)


def parsing_branch_case(rng):
    """Whole parsing branch (crop, resize, projection, pyramid, DB-Block,
    classifier) differentiated w.r.t. one aggregation weight. The box and the
    mask prior are discrete / detached inputs and held fixed."""
    model = MSDBModel(replace(_TINY, seed=int(rng.integers(1 << 31))))
    image = Tensor(rng.uniform(0, 1, (1, 3, 32, 32)))
    stages = model.backbone_forward(image)
    posterior = softmax_channelwise(model.mask_branch_forward(stages[3]))
    box = locate_hand(posterior)[0]
    fbox = feature_box(box, _TINY.input_size, _TINY.feature_size)
    conv = model.aggregate[0]
    w0 = conv.weight.data.astype(np.float64)
    score = _weighted(rng, (1, _TINY.num_parse_classes, 8, 8))

    def f(t):
        conv.weight = t
        try:
            return score(model.parsing_branch_forward(stages, posterior, [fbox]))
        finally:
            conv.weight = Tensor(w0)

    return f, w0


CASES: dict[str, Case] = {
    "conv2d": conv2d_input,
    "conv2d_weight": conv2d_weight,
    "transposed_conv2d": transposed_input,
    "transposed_conv2d_weight": transposed_weight,
    "bilinear_resize": bilinear,
    "pool2d_avg": _pool("avg"),
    "pool2d_max": _pool("max"),
    "relu": relu_case,
    "softmax": softmax_case,
    "cross_entropy": ce_case,
    "focal_loss": fl_case,
    "mcb_focal_loss": mcb_case,
    "mcb_focal_loss_logits": mcb_logits_case,
    "fuse_multiscale": dbblock_case,
    "parsing_branch": parsing_branch_case,
}

TOLERANCE = {np.float32: 1e-3, np.float64: 1e-6}

# The composite has many relu kinks; the default 32-bit step of 1e-3 can cross
# one. The reference is extended precision, so a smaller step costs nothing.
CASE_EPS = {"parsing_branch": 1e-5}


@dataclass
class CaseResult:
    name: str
    dtype: str
    instances: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def run_case(name: str, dtype=np.float32, instances: int = 20, seed: int = 0) -> CaseResult:
    dtype = np.dtype(dtype).type
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        with precision(dtype):
            f, x = CASES[name](rng)
        worst = max(worst, grad_check(f, x.astype(dtype), eps=CASE_EPS.get(name)))
    return CaseResult(name, np.dtype(dtype).name, instances, worst,
                      TOLERANCE[dtype], time.perf_counter() - t0)


def run_suite(dtypes=(np.float32, np.float64), instances: int = 20, seed: int = 0,
              names=None) -> list[CaseResult]:
    names = list(CASES) if names is None else names
    return [run_case(n, d, instances, seed) for d in dtypes for n in names]
