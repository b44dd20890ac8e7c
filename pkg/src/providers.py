"""Pluggable evaluation providers and their registry.

Four kinds, looked up by name:
 - embedding:  images -> [n, D] features (FID)
 - distance:   (a, b) -> float (diversity)
 - attributes: one-hot masks -> [n, N] scores in [0, 1]
 - pose:       one-hot masks -> DataFrame(roll, pitch, yaw) in degrees
The built-ins are cheap deterministic stand-ins for pretrained networks;
external ones are added with `register_provider`.
"""
from __future__ import annotations
from typing import Any, Callable, Dict, List, Sequence

import numpy as np
import pandas as pd
import torch

from .guardrails import ProviderError
from .toy_data import HAIR, SKIN, AttributeRule, toy_attribute_bits


def _flat(images) -> np.ndarray:
    if isinstance(images, torch.Tensor):
        images = images.detach().cpu().numpy()
    arr = np.asarray(images, dtype=np.float64)
    return arr.reshape(arr.shape[0], -1)


class RandomProjectionEmbedding:
    """Fixed Gaussian projection of flattened pixels, seeded per input width."""

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._matrices: Dict[int, np.ndarray] = {}

    def _matrix(self, width: int) -> np.ndarray:
        if width not in self._matrices:
            rng = np.random.default_rng([self.seed, width])
            self._matrices[width] = rng.normal(0.0, 1.0 / np.sqrt(width), (width, self.dim))
        return self._matrices[width]

    def __call__(self, images) -> np.ndarray:
        flat = _flat(images)
        return flat @ self._matrix(flat.shape[1])


def pixel_l1_distance(a, b) -> float:
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    return float(np.mean(np.abs(a.astype(np.float64) - b.astype(np.float64))))


class ToyOracleAttributes:
    def __init__(self, rules: Sequence[AttributeRule], min_pixels: int = 4):
        self.rules = list(rules)
        self.min_pixels = min_pixels

    @property
    def names(self) -> List[str]:
        return [r.name for r in self.rules]

    def __call__(self, masks) -> np.ndarray:
        return toy_attribute_bits(masks, self.rules, self.min_pixels).astype(np.float64)


class ToyGeometryPose:
    """Head pose proxies from the face region's second moments (degrees)."""

    def __init__(self, face_classes: Sequence[int] = (SKIN, HAIR)):
        self.face_classes = list(face_classes)

    def _angles(self, mask: np.ndarray) -> Dict[str, float]:
        face = mask[self.face_classes].sum(axis=0) > 0.5
        skin = mask[SKIN] > 0.5
        h, w = face.shape
        if not face.any():
            return {"roll": 0.0, "pitch": 0.0, "yaw": 0.0}
        ys, xs = np.nonzero(face)
        cy, cx = ys.mean(), xs.mean()
        cov = np.cov(np.stack([xs - cx, ys - cy])) if len(xs) > 1 else np.zeros((2, 2))
        roll = 0.5 * np.degrees(np.arctan2(2 * cov[0, 1], cov[0, 0] - cov[1, 1])) if cov.any() else 0.0
        sy, sx = (np.nonzero(skin) if skin.any() else (ys, xs))
        yaw = 90.0 * (sx.mean() - cx) / max(1.0, w / 2)
        pitch = 90.0 * (sy.mean() - cy) / max(1.0, h / 2)
        return {"roll": float(roll), "pitch": float(pitch), "yaw": float(yaw)}

    def __call__(self, masks, ids: Sequence[str] | None = None) -> pd.DataFrame:
        arrays = masks.detach().cpu().numpy() if isinstance(masks, torch.Tensor) else np.asarray(masks)
        ids = list(ids) if ids is not None else [str(i) for i in range(len(arrays))]
        return pd.DataFrame([{"id": i, **self._angles(m)} for i, m in zip(ids, arrays)])


_REGISTRY: Dict[str, Dict[str, Callable[..., Any]]] = {
    "embedding": {"random_projection": RandomProjectionEmbedding},
    "distance": {"pixel_l1": lambda **_: pixel_l1_distance},
    "attributes": {"toy_oracle": ToyOracleAttributes},
    "pose": {"toy_geometry": ToyGeometryPose},
}


def register_provider(kind: str, name: str, factory: Callable[..., Any]) -> None:
    if kind not in _REGISTRY:
        raise ProviderError(kind, "unknown provider kind")
    _REGISTRY[kind][name] = factory


def resolve_provider(kind: str, name: str, **kwargs) -> Any:
    factory = _REGISTRY.get(kind, {}).get(name)
    if factory is None:
        raise ProviderError(f"{kind}:{name}")
    return factory(**kwargs)


def available_providers() -> Dict[str, List[str]]:
    return {kind: sorted(names) for kind, names in _REGISTRY.items()}
