"""Procedural toy faces: desk-scale stand-in for a real face-parsing dataset.

Classes 0/1/2 are background/skin/hair; every attribute rule owns one more
class index and paints a simple shape when its presence bit is 1:
    bar     horizontal 2-px band at eye level (glasses)
    cap     block above the head (hat)
    studs   two 2x2 squares beside the head (earrings)
    fringe  band across the forehead (bangs)
Each sample is drawn from its own rng, seeded by (spec seed, sample index), so
sample i is the same whatever n is. RGB renders use a flat colour per region
plus per-sample jitter and pixel texture.
"""
from __future__ import annotations
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import torch

from .config import ToyDataConfig
from .ingest import Sample

BACKGROUND, SKIN, HAIR = 0, 1, 2
_PALETTE = np.array([
    [-0.7, -0.6, -0.3],  # background
    [0.6, 0.2, 0.0],     # skin
    [-0.4, -0.6, -0.8],  # hair
    [-0.9, -0.9, -0.9],  # glasses
    [0.8, -0.8, -0.2],
    [0.9, 0.9, -0.5],
    [-0.2, 0.5, -0.5],
], dtype=np.float32)


@dataclass
class AttributeRule:
    name: str
    region: int
    shape: str = "bar"
    presence: float = 0.5


@dataclass
class ToySpec:
    resolution: int = 32
    num_classes: int = 4
    rules: List[AttributeRule] = field(default_factory=lambda: [AttributeRule("eyeglasses", 3)])
    seed: int = 0
    min_pixels: int = 4
    with_images: bool = False

    @classmethod
    def from_config(cls, cfg: ToyDataConfig) -> "ToySpec":
        return cls(resolution=cfg.resolution, num_classes=cfg.num_classes,
                   rules=[AttributeRule(r.name, r.region, r.shape, r.presence) for r in cfg.rules],
                   seed=cfg.seed, min_pixels=cfg.min_pixels, with_images=cfg.with_images)


@dataclass
class _Face:
    cx: float
    cy: float
    ax: float
    ay: float


def _box(raster: np.ndarray, top: float, bottom: float, left: float, right: float, value: int) -> None:
    size = raster.shape[0]
    t, b = max(0, int(round(top))), min(size, int(round(bottom)))
    l, r = max(0, int(round(left))), min(size, int(round(right)))
    raster[t:b, l:r] = value


def _paint_rule(raster: np.ndarray, face: _Face, rule: AttributeRule) -> None:
    eye_y = face.cy - 0.1 * face.ay
    if rule.shape == "bar":
        _box(raster, eye_y - 1, eye_y + 1, face.cx - 0.8 * face.ax, face.cx + 0.8 * face.ax, rule.region)
    elif rule.shape == "cap":
        top_of_head = face.cy - face.ay
        _box(raster, top_of_head - 0.25 * face.ay, top_of_head + 0.15 * face.ay,
             face.cx - face.ax, face.cx + face.ax, rule.region)
    elif rule.shape == "studs":
        y = face.cy + 0.15 * face.ay
        for x in (face.cx - face.ax - 1, face.cx + face.ax - 1):
            _box(raster, y, y + 2, x, x + 2, rule.region)
    elif rule.shape == "fringe":
        _box(raster, face.cy - 0.55 * face.ay, face.cy - 0.35 * face.ay,
             face.cx - 0.6 * face.ax, face.cx + 0.6 * face.ax, rule.region)
    else:
        raise ValueError(f"unknown rule shape {rule.shape!r}")


def _draw_face(rng: np.random.Generator, size: int) -> tuple[np.ndarray, _Face]:
    face = _Face(cx=size / 2 + rng.uniform(-0.05, 0.05) * size, cy=size * 0.55 + rng.uniform(-0.04, 0.04) * size,
                 ax=size * rng.uniform(0.24, 0.3), ay=size * rng.uniform(0.32, 0.38))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    raster = np.full((size, size), BACKGROUND, dtype=np.uint8)
    hair_extent = ((xx - face.cx) / (face.ax + 2)) ** 2 + ((yy - face.cy) / (face.ay + 2)) ** 2 <= 1
    head = ((xx - face.cx) / face.ax) ** 2 + ((yy - face.cy) / face.ay) ** 2 <= 1
    hair_line = face.cy - face.ay * rng.uniform(0.55, 0.7)
    raster[hair_extent & (yy < face.cy)] = HAIR
    raster[head & (yy >= hair_line)] = SKIN
    return raster, face


def _render(raster: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    size = raster.shape[0]
    palette = np.empty((num_classes, 3), dtype=np.float32)
    for k in range(num_classes):
        base = _PALETTE[k] if k < len(_PALETTE) else np.random.default_rng([k]).uniform(-1, 1, 3)
        palette[k] = base + rng.normal(0.0, 0.1, 3)
    image = palette[raster].transpose(2, 0, 1) + rng.normal(0.0, 0.05, (3, size, size))
    return np.clip(image, -1.0, 1.0).astype(np.float32)


def make_toy_sample(spec: ToySpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    raster, face = _draw_face(rng, spec.resolution)
    bits = (rng.random(len(spec.rules)) < np.array([r.presence for r in spec.rules])).astype(np.int64)
    for rule, bit in zip(spec.rules, bits):
        if bit:
            _paint_rule(raster, face, rule)
    image = _render(raster, spec.num_classes, rng) if spec.with_images else None
    return Sample(id=f"toy-{spec.seed}-{index:06d}", raster=raster, labels=bits,
                  num_classes=spec.num_classes, image=image)


def make_toy_dataset(spec: ToySpec, n: int, start: int = 0) -> List[Sample]:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return [make_toy_sample(spec, i) for i in range(start, start + n)]


def toy_splits(cfg: ToyDataConfig) -> tuple[List[Sample], List[Sample]]:
    """Train samples use indices [0, n_train); test samples follow them."""
    spec = ToySpec.from_config(cfg)
    return make_toy_dataset(spec, cfg.n_train), make_toy_dataset(spec, cfg.n_test, start=cfg.n_train)


def toy_attribute_oracle(mask, rule: AttributeRule, min_pixels: int = 4) -> int:
    """1 iff the rule's region covers at least `min_pixels` pixels of a one-hot [R, H, W] mask."""
    if isinstance(mask, torch.Tensor):
        count = int(mask[rule.region].sum().item())
    else:
        count = int(np.asarray(mask)[rule.region].sum())
    return int(count >= min_pixels)


def toy_attribute_bits(masks, rules: Sequence[AttributeRule], min_pixels: int = 4) -> np.ndarray:
    """Batched oracle: [B, R, H, W] -> int64 [B, N]."""
    return np.array([[toy_attribute_oracle(m, rule, min_pixels) for rule in rules] for m in masks],
                    dtype=np.int64).reshape(len(masks), len(rules))
