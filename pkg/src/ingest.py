"""Mask/image ingestion, the one-hot mask codec, and deterministic batching.

Real-data layout (one directory):
    attributes.csv        header `id,<attr columns...>`; values > 0 mean present
    masks/<id>.png        single-channel 8-bit class-index raster
    images/<id>.png|jpg   RGB image (synthesis stage only)

Domain -> column mapping is a config table; a leading "!" negates a column
(e.g. `hair: "!Bald"`).
"""
from __future__ import annotations
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch

from .guardrails import ConfigError, MaskFormatError, MaskInvariantError, UsageError
from .image_io import read_raster, read_rgb

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def decode_mask(raster: np.ndarray, num_classes: int) -> np.ndarray:
    """Class-index raster [H, W] -> one-hot float32 [R, H, W]."""
    raster = np.asarray(raster)
    if not np.issubdtype(raster.dtype, np.integer):
        raise MaskFormatError(f"raster must hold integer class indices, got {raster.dtype}")
    if raster.ndim != 2:
        raise MaskFormatError(f"raster must be 2-D, got shape {raster.shape}")
    if raster.size and (raster.min() < 0 or raster.max() >= num_classes):
        raise MaskFormatError(f"class index out of range [0, {num_classes}): "
                              f"min {raster.min()}, max {raster.max()}")
    return np.eye(num_classes, dtype=np.float32)[raster].transpose(2, 0, 1).copy()


def encode_mask(mask) -> np.ndarray:
    """One-hot [R, H, W] -> uint8 class-index raster; MaskInvariantError if not one-hot."""
    if isinstance(mask, torch.Tensor):
        mask = mask.detach().cpu().numpy()
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise MaskInvariantError(f"mask must be [R, H, W], got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise MaskInvariantError("mask entries must be 0 or 1")
    if not (mask.sum(axis=0) == 1).all():
        raise MaskInvariantError("mask channels must sum to 1 at every pixel")
    return mask.argmax(axis=0).astype(np.uint8)


@dataclass
class Sample:
    id: str
    raster: np.ndarray  # uint8 [H, W]
    labels: np.ndarray  # int64 [N]
    num_classes: int
    image: Optional[np.ndarray] = None  # float32 [3, H, W] in [-1, 1]

    @property
    def mask(self) -> np.ndarray:
        return decode_mask(self.raster, self.num_classes)


@dataclass
class Batch:
    masks: torch.Tensor  # [B, R, H, W]
    labels: torch.Tensor  # [B, N] long
    ids: List[str] = field(default_factory=list)
    images: Optional[torch.Tensor] = None  # [B, 3, H, W]

    def __len__(self) -> int:
        return self.masks.shape[0]


def collate(samples: Sequence[Sample], flips: Optional[Sequence[bool]] = None) -> Batch:
    flips = list(flips) if flips is not None else [False] * len(samples)
    masks, images = [], []
    for s, flip in zip(samples, flips):
        m = s.mask
        masks.append(m[:, :, ::-1] if flip else m)
        if s.image is not None:
            images.append(s.image[:, :, ::-1] if flip else s.image)
    if images and len(images) != len(samples):
        raise UsageError("either every sample in a batch has an image or none does")
    return Batch(
        masks=torch.from_numpy(np.ascontiguousarray(np.stack(masks))),
        labels=torch.from_numpy(np.stack([s.labels for s in samples]).astype(np.int64)),
        ids=[s.id for s in samples],
        images=torch.from_numpy(np.ascontiguousarray(np.stack(images))) if images else None,
    )


def batches_per_epoch(n: int, batch_size: int) -> int:
    if batch_size < 2:
        raise UsageError(f"batch_size must be >= 2, got {batch_size}")
    per_epoch = n // batch_size
    if per_epoch == 0:
        raise UsageError(f"dataset of {n} samples is smaller than one batch of {batch_size}")
    return per_epoch


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    per_epoch = batches_per_epoch(n, batch_size)
    epoch, idx = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[idx * batch_size:(idx + 1) * batch_size]


def batch_at(dataset: Sequence[Sample], batch_size: int, seed: int, step: int, flip: bool = False) -> Batch:
    """The step-th batch of the seeded stream: random access, used for resume."""
    chosen = batch_indices(len(dataset), batch_size, seed, step)
    flips = None
    if flip:
        flips = (np.random.default_rng([seed, step, 1]).random(batch_size) < 0.5).tolist()
    return collate([dataset[i] for i in chosen], flips)


def batches(dataset: Sequence[Sample], batch_size: int, seed: int, epochs: int = 1, flip: bool = False,
            start_step: int = 0) -> Iterator[Batch]:
    """Seeded permutation per epoch; the short tail of each epoch is dropped."""
    total = epochs * batches_per_epoch(len(dataset), batch_size)
    for step in range(start_step, total):
        yield batch_at(dataset, batch_size, seed, step, flip)


def split_dataset(samples: Sequence[Sample], test_fraction: float, seed: int) -> Tuple[List[Sample], List[Sample]]:
    perm = np.random.default_rng([seed, 2]).permutation(len(samples))
    n_test = max(1, int(round(len(samples) * test_fraction)))
    test = [samples[i] for i in sorted(perm[:n_test])]
    train = [samples[i] for i in sorted(perm[n_test:])]
    return train, test


def resolve_labels(table: pd.DataFrame, domain_names: Sequence[str], columns: Dict[str, str]) -> np.ndarray:
    """Attribute table -> int64 [n, N] bits following the domain -> column map."""
    bits = []
    for name in domain_names:
        spec = columns.get(name)
        if spec is None:
            raise ConfigError(f"dataset.attribute_columns.{name}", "no column mapped for this domain")
        negate = spec.startswith("!")
        column = spec[1:] if negate else spec
        if column not in table.columns:
            raise ConfigError(f"dataset.attribute_columns.{name}", f"column {column!r} not in attribute table")
        present = pd.to_numeric(table[column], errors="raise").to_numpy() > 0
        bits.append(~present if negate else present)
    return np.stack(bits, axis=1).astype(np.int64)


def _find_image(folder: Path, sample_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        candidate = folder / f"{sample_id}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no image for {sample_id} under {folder} (tried {', '.join(IMAGE_SUFFIXES)})")


def load_directory(root: str | Path, num_classes: int, domain_names: Sequence[str], columns: Dict[str, str],
                   with_images: bool = False) -> List[Sample]:
    root = Path(root)
    table_path = root / "attributes.csv"
    if not table_path.exists():
        raise FileNotFoundError(f"attribute table not found at {table_path}")
    table = pd.read_csv(table_path, dtype={"id": str})
    if "id" not in table.columns:
        raise MaskFormatError(f"{table_path}: missing 'id' column")
    labels = resolve_labels(table, domain_names, columns)
    samples: List[Sample] = []
    for row, sample_id in enumerate(table["id"]):
        raster = read_raster(root / "masks" / f"{sample_id}.png")
        decode_mask(raster, num_classes)  # range check
        image = None
        if with_images:
            image = read_rgb(_find_image(root / "images", sample_id), size=raster.shape)
        samples.append(Sample(id=sample_id, raster=raster, labels=labels[row], num_classes=num_classes, image=image))
    return samples
