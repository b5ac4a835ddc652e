"""Synthetic articulated-hand scenes, augmentation, statistics and persistence.

A hand is a chain of ``P`` overlapping elliptical segments. Parse ids are
``0`` for background, ``1..P`` for the left hand's segments and
``P+1..2P`` for the right hand's. The coarse segmentation label (0 background,
1 left, 2 right) is a pure function of the parse label.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import container
from .losses import class_ratios

__all__ = [
    "AugmentConfig",
    "AugmentPlan",
    "DatasetError",
    "ParsingSample",
    "SceneSpec",
    "apply_plan",
    "augment",
    "class_names",
    "dataset_stats",
    "generate_dataset",
    "generate_scene",
    "load_dataset",
    "project_parse_to_seg",
    "sample_plan",
    "save_dataset",
    "worker_count",
]


class DatasetError(ValueError):
    """Raised for missing, corrupt or inconsistent dataset files."""


@dataclass
class ParsingSample:
    image: np.ndarray  # 3×H×W float32 in [0, 1]
    parse_label: np.ndarray  # H×W uint8
    seg_label: np.ndarray  # H×W uint8


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    parts_per_hand: int = 3
    hands: str = "both"  # both | left | right | random
    part_length: tuple[float, float] = (0.22, 0.3)  # fraction of min(H, W)
    part_aspect: float = 0.55  # minor / major axis
    clutter: int = 4  # background distractor blobs
    part_contrast: float = 0.12
    noise: float = 0.02
    bg_fraction: tuple[float, float] = (0.6, 0.95)
    palette_seed: int | None = None  # defaults to ``seed``


def worker_count() -> int:
    """Worker cap from ``MSDB_THREADS`` (0 means run in the calling thread)."""
    try:
        return max(0, int(os.environ.get("MSDB_THREADS", "0")))
    except ValueError:
        return 0


def project_parse_to_seg(parse: np.ndarray, parts_per_hand: int) -> np.ndarray:
    parse = np.asarray(parse)
    seg = np.zeros(parse.shape, dtype=np.uint8)
    seg[(parse >= 1) & (parse <= parts_per_hand)] = 1
    seg[parse > parts_per_hand] = 2
    return seg


def class_names(parts_per_hand: int) -> list[str]:
    names = ["background"]
    for side in ("left", "right"):
        names += [f"{side}_{j + 1}" for j in range(parts_per_hand)]
    return names


def _palette(seed: int, parts: int, contrast: float) -> np.ndarray:
    # Fixed per-dataset tint of every part relative to its hand's skin tone.
    rng = np.random.default_rng([seed, 0xFA1])
    return rng.uniform(-contrast, contrast, size=(2, parts, 3))


def _ellipse(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _render_background(rng, h, w, clutter):
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.1, 0.6, 3)
    grad = rng.uniform(-0.3, 0.3, (2, 3))
    img = base[:, None, None] + grad[0][:, None, None] * yy + grad[1][:, None, None] * xx
    yi, xi = np.mgrid[0:h, 0:w]
    for _ in range(clutter):
        mask = _ellipse(yi, xi, rng.uniform(0, h), rng.uniform(0, w),
                        rng.uniform(3, h / 4), rng.uniform(3, w / 4), rng.uniform(0, np.pi))
        img[:, mask] = rng.uniform(0.0, 1.0, 3)[:, None]
    return img


def _render_hand(rng, parse, img, side, spec, palette, h, w):
    """Draw one hand; later segments overwrite earlier ones (self-occlusion)."""
    P = spec.parts_per_hand
    yi, xi = np.mgrid[0:h, 0:w]
    scale = min(h, w)
    length = rng.uniform(*spec.part_length) * scale
    theta = rng.uniform(0, 2 * np.pi)
    # Start so that the chain's rough midpoint lands inside the hand's half.
    reach = 1.1 * length
    cy = rng.uniform(0.3 * h, 0.7 * h) - np.sin(theta) * reach
    cx = (rng.uniform(0.2 * w, 0.42 * w) if side == 0 else rng.uniform(0.58 * w, 0.8 * w)) \
        - np.cos(theta) * reach
    curl = (0.35 if side == 0 else -0.35) + rng.normal(0, 0.1)
    skin = np.array([0.85, 0.62, 0.48]) + rng.normal(0, 0.03, 3)
    if side == 1:
        skin = skin + np.array([-0.05, 0.02, 0.06])
    start_y, start_x = cy, cx
    for j in range(P):
        seg_len = length * (1.0 - 0.18 * j)
        a = seg_len / 2
        b = a * spec.part_aspect * (1.25 if j == 0 else 1.0)
        my = start_y + np.sin(theta) * a
        mx = start_x + np.cos(theta) * a
        mask = _ellipse(yi, xi, my, mx, a, b, theta)
        color = np.clip(skin + palette[side, j], 0, 1)
        shade = 1.0 - 0.25 * ((yi - my) ** 2 + (xi - mx) ** 2) / (a * a)
        img[:, mask] = (color[:, None] * np.clip(shade[mask], 0.6, 1.0)[None, :])
        parse[mask] = 1 + side * P + j
        start_y += np.sin(theta) * seg_len * 0.8
        start_x += np.cos(theta) * seg_len * 0.8
        theta += curl + rng.normal(0, 0.15)


def generate_scene(spec: SceneSpec, size: tuple[int, int] = (64, 64)) -> ParsingSample:
    """Render one scene; a pure function of ``spec`` and ``size``."""
    h, w = size
    P = spec.parts_per_hand
    if P < 2 or h < 32 or w < 32:
        raise ValueError(f"degenerate scene request: parts={P}, size={size}")
    lo, hi = spec.bg_fraction
    if not 0 <= lo < hi <= 1:
        raise ValueError(f"invalid background fraction range {spec.bg_fraction}")
    palette_seed = spec.seed if spec.palette_seed is None else spec.palette_seed
    palette = _palette(palette_seed, P, spec.part_contrast)
    rng = np.random.default_rng(spec.seed)
    for _ in range(100):
        hands = spec.hands
        if hands == "random":
            hands = rng.choice(["both", "both", "left", "right"])
        sides = {"both": (0, 1), "left": (0,), "right": (1,)}[hands]
        img = _render_background(rng, h, w, spec.clutter)
        parse = np.zeros((h, w), dtype=np.uint8)
        for side in sides:
            _render_hand(rng, parse, img, side, spec, palette, h, w)
        img = img + rng.normal(0, spec.noise, img.shape)
        seg = project_parse_to_seg(parse, P)
        bg = float((parse == 0).mean())
        # Each hand must keep a reasonable share of its pixels in view.
        visible = all((seg == side + 1).sum() >= 0.004 * h * w for side in sides)
        if visible and lo <= bg <= hi:
            return ParsingSample(np.clip(img, 0, 1).astype(np.float32), parse, seg)
    raise ValueError(f"could not satisfy background fraction {spec.bg_fraction} for {spec}")


def generate_dataset(spec: SceneSpec, count: int, size=(64, 64)) -> list[ParsingSample]:
    """``count`` scenes sharing one part palette; scene ``i`` is seeded from
    ``(spec.seed, i)`` so generation order does not matter."""
    palette_seed = spec.seed if spec.palette_seed is None else spec.palette_seed

    def build(i):
        seed = int(np.random.SeedSequence([spec.seed, i]).generate_state(1)[0])
        return generate_scene(replace(spec, seed=seed, palette_seed=palette_seed), size)

    workers = worker_count()
    if workers <= 1:
        return [build(i) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(build, range(count)))


@dataclass(frozen=True)
class AugmentConfig:
    p_brightness: float = 1 / 3
    p_channel_shift: float = 1 / 5
    p_contrast: float = 1 / 7
    brightness: float = 0.2
    channel_shift: float = 0.1
    contrast: tuple[float, float] = (0.8, 1.25)


@dataclass(frozen=True)
class AugmentPlan:
    brightness: float | None = None
    channel_shift: tuple[float, float, float] | None = None
    contrast: float | None = None


def sample_plan(rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> AugmentPlan:
    """Draw which photometric transforms apply, each independently."""
    brightness = shift = contrast = None
    if rng.random() < cfg.p_brightness:
        brightness = float(rng.uniform(-cfg.brightness, cfg.brightness))
    if rng.random() < cfg.p_channel_shift:
        shift = tuple(float(v) for v in rng.uniform(-cfg.channel_shift, cfg.channel_shift, 3))
    if rng.random() < cfg.p_contrast:
        contrast = float(rng.uniform(*cfg.contrast))
    return AugmentPlan(brightness, shift, contrast)


def apply_plan(sample: ParsingSample, plan: AugmentPlan) -> ParsingSample:
    img = sample.image.astype(np.float32, copy=True)
    if plan.brightness is not None:
        img += np.float32(plan.brightness)
    if plan.channel_shift is not None:
        img += np.asarray(plan.channel_shift, dtype=np.float32)[:, None, None]
    if plan.contrast is not None:
        mean = img.mean()
        img = (img - mean) * np.float32(plan.contrast) + mean
    return ParsingSample(np.clip(img, 0, 1), sample.parse_label, sample.seg_label)


def augment(sample: ParsingSample, rng: np.random.Generator,
            cfg: AugmentConfig = AugmentConfig()) -> ParsingSample:
    """Random brightness / channel shift / contrast; labels pass through."""
    return apply_plan(sample, sample_plan(rng, cfg))


def dataset_stats(samples: Sequence[ParsingSample], num_classes: int,
                  names: Sequence[str] | None = None) -> dict[str, float]:
    """Pixel share of every class pooled over all samples."""
    if not samples:
        raise ValueError("dataset_stats needs at least one sample")
    stacked = np.concatenate([s.parse_label.reshape(-1) for s in samples])
    ratios = class_ratios(stacked, num_classes)
    names = list(names) if names is not None else [str(i) for i in range(num_classes)]
    return dict(zip(names, ratios.tolist()))


# -- persistence ----------------------------------------------------------

MANIFEST = "manifest.txt"


def save_dataset(path: str | Path, samples: Sequence[ParsingSample],
                 num_classes: int, parts_per_hand: int) -> None:
    root = Path(path)
    for sub in ("images", "parse", "seg"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    h, w = samples[0].parse_label.shape if samples else (0, 0)
    for i, s in enumerate(samples):
        container.save(root / "images" / f"{i:04d}.msdt", s.image.astype(np.float32))
        container.save(root / "parse" / f"{i:04d}.msdt", s.parse_label.astype(np.uint8))
        container.save(root / "seg" / f"{i:04d}.msdt", s.seg_label.astype(np.uint8))
    (root / MANIFEST).write_text(
        f"count = {len(samples)}\nheight = {h}\nwidth = {w}\n"
        f"num_parse_classes = {num_classes}\nparts_per_hand = {parts_per_hand}\n"
    )


def read_manifest(path: str | Path) -> dict[str, int]:
    file = Path(path) / MANIFEST
    if not file.exists():
        raise DatasetError(f"{file} not found")
    out = {}
    for line in file.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        try:
            out[key.strip()] = int(value)
        except ValueError:
            raise DatasetError(f"{file}: bad manifest line {line!r}") from None
    for key in ("count", "height", "width", "num_parse_classes", "parts_per_hand"):
        if key not in out:
            raise DatasetError(f"{file}: missing key {key!r}")
    return out


def load_dataset(path: str | Path) -> tuple[list[ParsingSample], dict[str, int]]:
    """Load and validate a dataset directory; returns ``(samples, manifest)``."""
    root = Path(path)
    meta = read_manifest(root)
    h, w, C, P = meta["height"], meta["width"], meta["num_parse_classes"], meta["parts_per_hand"]
    samples = []
    for i in range(meta["count"]):
        files = [root / sub / f"{i:04d}.msdt" for sub in ("images", "parse", "seg")]
        for f in files:
            if not f.exists():
                raise DatasetError(f"sample {i:04d}: missing {f.relative_to(root)}")
        try:
            image, parse, seg = (container.load(f) for f in files)
        except container.ContainerError as exc:
            raise DatasetError(f"sample {i:04d}: {exc}") from exc
        if image.shape != (3, h, w) or parse.shape != (h, w) or seg.shape != (h, w):
            raise DatasetError(f"sample {i:04d}: shapes disagree with manifest")
        if image.dtype != np.float32 or parse.dtype != np.uint8 or seg.dtype != np.uint8:
            raise DatasetError(f"sample {i:04d}: unexpected dtypes")
        if parse.max() >= C:
            raise DatasetError(f"sample {i:04d}: parse id {parse.max()} >= {C}")
        if not np.array_equal(seg, project_parse_to_seg(parse, P)):
            raise DatasetError(f"sample {i:04d}: seg label is not the projection of parse label")
        samples.append(ParsingSample(image, parse, seg))
    return samples, meta
