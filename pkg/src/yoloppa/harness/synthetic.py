"""Desk-scale stand-in for a traffic-sign set: colored shapes on noise.

Each class is a (shape, hue) pair.  Objects are axis-aligned: the shape spans
its whole square footprint, so the recorded box is exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from ..tensor import Tensor
from ..types import BoxXYXY, GroundTruthBox
from .dataset import Sample

# (shape, RGB) per class; the first four mirror the four sign categories.
CLASS_STYLES = [
    ("circle", (0.90, 0.10, 0.10)),
    ("triangle", (0.95, 0.85, 0.10)),
    ("square", (0.10, 0.30, 0.95)),
    ("octagon", (0.10, 0.80, 0.25)),
    ("circle", (0.10, 0.85, 0.90)),
    ("triangle", (0.85, 0.20, 0.85)),
    ("square", (0.95, 0.55, 0.10)),
    ("octagon", (0.95, 0.95, 0.95)),
]
MAX_ATTEMPTS = 20


class SyntheticConfigError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    num_images: int = 300
    image_size: int = 128
    num_classes: int = 4
    frequencies: tuple = (0.70, 0.15, 0.10, 0.05)
    objects_per_image: tuple = (1, 3)
    size_range: tuple = (12, 40)
    noise: float = 0.08
    seed: int = 0
    name_prefix: str = "syn"

    def __post_init__(self):
        self.frequencies = tuple(float(f) for f in self.frequencies)
        self.objects_per_image = tuple(int(v) for v in self.objects_per_image)
        self.size_range = tuple(int(v) for v in self.size_range)
        self.validate()

    def validate(self) -> None:
        if self.num_images < 0:
            raise SyntheticConfigError("num_images must be >= 0")
        if not 1 <= self.num_classes <= len(CLASS_STYLES):
            raise SyntheticConfigError(f"num_classes must lie in [1, {len(CLASS_STYLES)}]")
        if len(self.frequencies) != self.num_classes:
            raise SyntheticConfigError(
                f"{len(self.frequencies)} frequencies for {self.num_classes} classes")
        if any(f < 0 for f in self.frequencies) or abs(sum(self.frequencies) - 1.0) > 1e-9:
            raise SyntheticConfigError(f"frequencies must be non-negative and sum to 1: {self.frequencies}")
        lo, hi = self.size_range
        if lo < 8 or hi < lo:
            raise SyntheticConfigError(f"size_range must satisfy 8 <= min <= max, got {self.size_range}")
        if hi >= self.image_size:
            raise SyntheticConfigError("objects must be smaller than the image")
        a, b = self.objects_per_image
        if a < 0 or b < a:
            raise SyntheticConfigError(f"objects_per_image must satisfy 0 <= min <= max, got {self.objects_per_image}")

    @property
    def class_names(self) -> list:
        return [f"{s}_{i}" for i, (s, _) in enumerate(CLASS_STYLES[: self.num_classes])]


@dataclass
class GenerationStats:
    placed: int = 0
    skipped: int = 0
    per_class: list = field(default_factory=list)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean (size, size) mask sampled at pixel centers."""
    c = (np.arange(size) + 0.5) / size * 2 - 1  # [-1, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        return x * x + y * y <= 1.0
    if kind == "triangle":  # apex top-center, base along the bottom edge
        return np.abs(x) <= (y + 1) / 2
    if kind == "octagon":
        return np.abs(x) + np.abs(y) <= np.sqrt(2)  # regular octagon, flat sides on the frame
    raise ValueError(f"unknown shape {kind!r}")


def _overlaps(box: tuple, others: Sequence[tuple], margin: float) -> bool:
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in others:
        if x1 < a2 + margin and a1 < x2 + margin and y1 < b2 + margin and b1 < y2 + margin:
            return True
    return False


def _render(cfg: SyntheticConfig, idx: int, rng: np.random.Generator, stats: GenerationStats) -> Sample:
    s = cfg.image_size
    base = rng.uniform(0.25, 0.6, size=3)
    img = base[:, None, None] + cfg.noise * rng.standard_normal((3, s, s))
    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    placed: list = []
    gts: list = []
    lo, hi = cfg.size_range
    for _ in range(n_obj):
        cls = int(rng.choice(cfg.num_classes, p=cfg.frequencies))
        for _attempt in range(MAX_ATTEMPTS):
            size = int(rng.integers(lo, hi + 1))
            x = int(rng.integers(0, s - size + 1))
            y = int(rng.integers(0, s - size + 1))
            box = (x, y, x + size, y + size)
            # strictly inside the frame and clear of earlier objects
            if x == 0 or y == 0 or x + size == s or y + size == s or _overlaps(box, placed, 2):
                continue
            break
        else:
            stats.skipped += 1
            continue
        kind, rgb = CLASS_STYLES[cls]
        mask = shape_mask(kind, size)
        shade = np.asarray(rgb)[:, None, None] * rng.uniform(0.85, 1.0)
        region = img[:, y:y + size, x:x + size]
        img[:, y:y + size, x:x + size] = np.where(mask[None], shade, region)
        placed.append(box)
        gts.append(GroundTruthBox(cls, BoxXYXY(float(x), float(y), float(x + size), float(y + size))))
        stats.placed += 1
        stats.per_class[cls] += 1
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    # quantize to the 8-bit levels a written dataset would hold, so in-memory
    # and on-disk sets are identical
    img = (np.rint(img * 255.0) / 255.0).astype(np.float32)
    return Sample(Tensor(img, dtype=np.float32), gts, f"{cfg.name_prefix}_{idx:05d}.ppm")


def generate_synthetic(cfg: SyntheticConfig, stats: Optional[GenerationStats] = None) -> List[Sample]:
    stats = stats if stats is not None else GenerationStats()
    stats.per_class = [0] * cfg.num_classes
    root = np.random.SeedSequence(cfg.seed)
    children = root.spawn(cfg.num_images)
    return [_render(cfg, i, np.random.default_rng(children[i]), stats) for i in range(cfg.num_images)]


def class_histogram(samples: Sequence[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        for g in s.gts:
            counts[g.cls] += 1
    return counts
