"""Tests for the procedural toy-face generator and its attribute oracle."""
import numpy as np
import pytest

from src.config import RuleConfig, ToyDataConfig
from src.toy_data import (BACKGROUND, HAIR, SKIN, AttributeRule, ToySpec, make_toy_dataset, make_toy_sample,
                          toy_attribute_bits, toy_attribute_oracle, toy_splits)

FOUR_RULES = [AttributeRule("eyeglasses", 3, "bar"), AttributeRule("hat", 4, "cap"),
              AttributeRule("earrings", 5, "studs"), AttributeRule("bangs", 6, "fringe")]


def test_samples_are_deterministic_and_index_stable():
    spec = ToySpec(seed=3, with_images=True)
    a = make_toy_sample(spec, 5)
    b = make_toy_dataset(spec, 10)[5]
    assert a.id == b.id == "toy-3-000005"
    assert np.array_equal(a.raster, b.raster)
    assert np.array_equal(a.image, b.image)
    assert not np.array_equal(make_toy_sample(ToySpec(seed=4), 5).raster, a.raster)


def test_face_classes_are_present():
    raster = make_toy_sample(ToySpec(), 0).raster
    for cls in (BACKGROUND, SKIN, HAIR):
        assert (raster == cls).sum() > 0


@pytest.mark.parametrize("resolution", [16, 32])
def test_label_bit_matches_painted_region(resolution):
    spec = ToySpec(resolution=resolution, num_classes=7, rules=FOUR_RULES, seed=1)
    for sample in make_toy_dataset(spec, 60):
        for rule, bit in zip(FOUR_RULES, sample.labels):
            count = int((sample.raster == rule.region).sum())
            assert (count >= spec.min_pixels) == bool(bit), (sample.id, rule.name, count)
        assert toy_attribute_bits(sample.mask[None], FOUR_RULES).tolist()[0] == sample.labels.tolist()


def test_presence_rate():
    samples = make_toy_dataset(ToySpec(), 1000)
    rate = np.mean([s.labels[0] for s in samples])
    assert abs(rate - 0.5) <= 0.05


def test_presence_extremes():
    always = ToySpec(rules=[AttributeRule("eyeglasses", 3, presence=1.0)])
    never = ToySpec(rules=[AttributeRule("eyeglasses", 3, presence=0.0)])
    assert all(s.labels[0] == 1 for s in make_toy_dataset(always, 20))
    assert all(s.labels[0] == 0 for s in make_toy_dataset(never, 20))


def test_oracle_threshold():
    mask = np.zeros((4, 8, 8), dtype=np.float32)
    mask[0] = 1
    mask[0, 0, :3] = 0
    mask[3, 0, :3] = 1
    rule = AttributeRule("eyeglasses", 3)
    assert toy_attribute_oracle(mask, rule, min_pixels=4) == 0
    assert toy_attribute_oracle(mask, rule, min_pixels=3) == 1


def test_rgb_render_range():
    sample = make_toy_sample(ToySpec(with_images=True), 0)
    assert sample.image.shape == (3, 32, 32)
    assert sample.image.dtype == np.float32
    assert sample.image.min() >= -1.0 and sample.image.max() <= 1.0


def test_splits_follow_config():
    cfg = ToyDataConfig(resolution=16, n_train=6, n_test=3, rules=[RuleConfig(shape="studs")])
    train, test = toy_splits(cfg)
    assert len(train) == 6 and len(test) == 3
    assert test[0].id == "toy-0-000006"
    assert train[0].raster.shape == (16, 16)


def test_dataset_needs_samples():
    with pytest.raises(ValueError):
        make_toy_dataset(ToySpec(), 0)
