"""PNG read/write for class-index mask rasters and RGB images (Pillow)."""
from __future__ import annotations
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from PIL import Image

from .guardrails import MaskFormatError


def read_raster(path: str | Path) -> np.ndarray:
    """Single-channel 8-bit class-index PNG -> uint8 [H, W]."""
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise MaskFormatError(f"{path}: expected 8-bit single-channel raster, got mode {img.mode}")
        return np.asarray(img, dtype=np.uint8).copy()


def write_raster(path: str | Path, raster: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(raster, dtype=np.uint8)).save(path)


def read_rgb(path: str | Path, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """RGB file -> float32 [3, H, W] in [-1, 1]."""
    with Image.open(path) as img:
        img = img.convert("RGB")
        if size is not None and img.size != (size[1], size[0]):
            img = img.resize((size[1], size[0]), Image.BICUBIC)
        arr = np.asarray(img, dtype=np.float32)
    return (arr.transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def to_uint8(image) -> np.ndarray:
    """[3, H, W] in [-1, 1] (clamped) -> uint8 [H, W, 3]."""
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().numpy()
    arr = np.clip(np.asarray(image, dtype=np.float64), -1.0, 1.0)
    return np.rint((arr.transpose(1, 2, 0) + 1.0) * 127.5).astype(np.uint8)


def save_rgb(path: str | Path, image) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path)
