"""Tests for the evaluation provider registry and the built-in providers."""
import numpy as np
import pytest
import torch

from src.guardrails import ProviderError
from src.providers import (RandomProjectionEmbedding, ToyGeometryPose, available_providers, pixel_l1_distance,
                           register_provider, resolve_provider)
from src.toy_data import AttributeRule, ToySpec, make_toy_dataset


def test_random_projection_is_seeded():
    images = torch.randn(5, 3, 4, 4)
    a = RandomProjectionEmbedding(dim=8, seed=1)(images)
    b = RandomProjectionEmbedding(dim=8, seed=1)(images.numpy())
    assert a.shape == (5, 8)
    assert np.allclose(a, b)
    assert not np.allclose(a, RandomProjectionEmbedding(dim=8, seed=2)(images))


def test_pixel_l1_distance():
    assert pixel_l1_distance(torch.zeros(2, 2), torch.ones(2, 2)) == 1.0
    assert pixel_l1_distance(np.zeros(3), np.array([0.0, 3.0, 0.0])) == pytest.approx(1.0)


def test_toy_oracle_provider_scores_masks():
    rules = [AttributeRule("eyeglasses", 3), AttributeRule("hat", 4, "cap")]
    samples = make_toy_dataset(ToySpec(num_classes=5, rules=rules), 8)
    oracle = resolve_provider("attributes", "toy_oracle", rules=rules)
    scores = oracle(np.stack([s.mask for s in samples]))
    assert oracle.names == ["eyeglasses", "hat"]
    assert scores.tolist() == np.stack([s.labels for s in samples]).astype(float).tolist()


def test_toy_geometry_pose_table():
    samples = make_toy_dataset(ToySpec(), 3)
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    table = ToyGeometryPose()(masks, ids=["a", "b", "c"])
    assert table.columns.tolist() == ["id", "roll", "pitch", "yaw"]
    assert table["id"].tolist() == ["a", "b", "c"]
    assert np.isfinite(table[["roll", "pitch", "yaw"]].to_numpy()).all()


def test_pose_of_mirrored_face_flips_yaw_sign():
    mask = make_toy_dataset(ToySpec(), 1)[0].mask
    pose = ToyGeometryPose()
    a = pose([mask]).iloc[0]
    b = pose([mask[:, :, ::-1].copy()]).iloc[0]
    assert b["yaw"] == pytest.approx(-a["yaw"], abs=1e-9)
    assert b["pitch"] == pytest.approx(a["pitch"], abs=1e-9)


def test_empty_face_has_zero_pose():
    mask = np.zeros((4, 8, 8), dtype=np.float32)
    mask[0] = 1
    row = ToyGeometryPose()([mask]).iloc[0]
    assert (row["roll"], row["pitch"], row["yaw"]) == (0.0, 0.0, 0.0)


def test_unknown_provider_names_the_lookup():
    with pytest.raises(ProviderError) as e:
        resolve_provider("embedding", "inception")
    assert e.value.name == "embedding:inception"
    with pytest.raises(ProviderError):
        register_provider("segmenter", "x", object)


def test_register_custom_provider(monkeypatch):
    from src import providers
    monkeypatch.setitem(providers._REGISTRY, "distance", dict(providers._REGISTRY["distance"]))
    register_provider("distance", "zero", lambda **_: (lambda a, b: 0.0))
    assert resolve_provider("distance", "zero")(1, 2) == 0.0
    assert "zero" in available_providers()["distance"]
