"""Tests for the mask codec, raster I/O, batching and directory loading."""
import numpy as np
import pandas as pd
import pytest
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from src.guardrails import ConfigError, MaskFormatError, MaskInvariantError, UsageError
from src.image_io import read_raster, read_rgb, save_rgb, to_uint8, write_raster
from src.ingest import (Sample, batch_at, batch_indices, batches, collate, decode_mask, encode_mask,
                        load_directory, resolve_labels, split_dataset)


def _samples(n, size=4, num_classes=3):
    return [Sample(id=f"s{i}", raster=np.full((size, size), i % num_classes, dtype=np.uint8),
                   labels=np.array([i % 2], dtype=np.int64), num_classes=num_classes) for i in range(n)]


def test_decode_all_background():
    mask = decode_mask(np.zeros((3, 5), dtype=np.uint8), 4)
    assert mask.shape == (4, 3, 5)
    assert mask[0].sum() == 15 and mask[1:].sum() == 0


def test_decode_rejects_bad_rasters():
    with pytest.raises(MaskFormatError):
        decode_mask(np.array([[0, 4]], dtype=np.uint8), 4)
    with pytest.raises(MaskFormatError):
        decode_mask(np.zeros((2, 2), dtype=np.float32), 4)
    with pytest.raises(MaskFormatError):
        decode_mask(np.zeros((2, 2, 2), dtype=np.uint8), 4)


def test_encode_rejects_non_one_hot():
    mask = np.zeros((3, 2, 2), dtype=np.float32)
    with pytest.raises(MaskInvariantError):
        encode_mask(mask)
    mask[0] = 0.5
    mask[1] = 0.5
    with pytest.raises(MaskInvariantError):
        encode_mask(mask)


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.integers(0, 4)))
def test_codec_recovers_raster(raster):
    assert np.array_equal(encode_mask(decode_mask(raster, 5)), raster)
    assert np.array_equal(encode_mask(torch.from_numpy(decode_mask(raster, 5))), raster)


def test_raster_png_roundtrip(tmp_path):
    raster = np.arange(12, dtype=np.uint8).reshape(3, 4)
    write_raster(tmp_path / "m.png", raster)
    assert np.array_equal(read_raster(tmp_path / "m.png"), raster)


def test_rgb_raster_is_rejected(tmp_path):
    save_rgb(tmp_path / "rgb.png", np.zeros((3, 4, 4), dtype=np.float32))
    with pytest.raises(MaskFormatError):
        read_raster(tmp_path / "rgb.png")


def test_rgb_io_range_and_clamp(tmp_path):
    image = np.stack([np.full((2, 2), -5.0), np.zeros((2, 2)), np.full((2, 2), 1.0)])
    assert to_uint8(image)[0, 0].tolist() == [0, 128, 255]
    save_rgb(tmp_path / "x.png", image)
    back = read_rgb(tmp_path / "x.png")
    assert back.shape == (3, 2, 2)
    assert back.min() >= -1.0 and back.max() <= 1.0
    assert read_rgb(tmp_path / "x.png", size=(4, 4)).shape == (3, 4, 4)


def test_collate_and_flip():
    raster = np.array([[0, 1], [0, 1]], dtype=np.uint8)
    s = Sample(id="a", raster=raster, labels=np.array([1]), num_classes=2,
               image=np.arange(12, dtype=np.float32).reshape(3, 2, 2))
    batch = collate([s, s], flips=[False, True])
    assert len(batch) == 2
    assert batch.masks.shape == (2, 2, 2, 2)
    assert torch.equal(batch.masks[1, 1], torch.tensor([[1.0, 0.0], [1.0, 0.0]]))
    assert torch.equal(batch.images[1, 0], torch.tensor([[1.0, 0.0], [3.0, 2.0]]))
    assert batch.labels.dtype == torch.int64


def test_collate_rejects_mixed_images():
    a = _samples(1)[0]
    b = Sample(id="b", raster=a.raster, labels=a.labels, num_classes=3, image=np.zeros((3, 4, 4), np.float32))
    with pytest.raises(UsageError):
        collate([a, b])


def test_epoch_visits_each_sample_once_and_drops_tail():
    data = _samples(7)
    seen = [i for b in batches(data, 2, seed=3) for i in b.ids]
    assert len(seen) == 6 and len(set(seen)) == 6


def test_batching_is_deterministic_and_random_access():
    data = _samples(10)
    stream = [b.ids for b in batches(data, 3, seed=1, epochs=2)]
    assert stream == [b.ids for b in batches(data, 3, seed=1, epochs=2)]
    assert batch_at(data, 3, 1, 4).ids == stream[4]
    assert [b.ids for b in batches(data, 3, seed=1, epochs=2, start_step=4)] == stream[4:]
    assert stream != [b.ids for b in batches(data, 3, seed=2, epochs=2)]


def test_flip_draws_are_seeded():
    data = _samples(8)
    a = batch_at(data, 4, 0, 2, flip=True)
    b = batch_at(data, 4, 0, 2, flip=True)
    assert torch.equal(a.masks, b.masks)


def test_batch_size_guards():
    with pytest.raises(UsageError):
        batch_indices(10, 1, 0, 0)
    with pytest.raises(UsageError):
        batch_indices(3, 4, 0, 0)


def test_split_is_disjoint_and_seeded():
    data = _samples(20)
    train, test = split_dataset(data, 0.1, seed=0)
    assert len(test) == 2 and len(train) == 18
    assert not {s.id for s in train} & {s.id for s in test}
    assert [s.id for s in test] == [s.id for s in split_dataset(data, 0.1, seed=0)[1]]


def test_resolve_labels_with_negation():
    table = pd.DataFrame({"id": ["a", "b"], "Eyeglasses": [1, -1], "Bald": [-1, 1]})
    bits = resolve_labels(table, ["eyeglasses", "hair"], {"eyeglasses": "Eyeglasses", "hair": "!Bald"})
    assert bits.tolist() == [[1, 1], [0, 0]]
    with pytest.raises(ConfigError) as e:
        resolve_labels(table, ["hat"], {})
    assert e.value.field_path == "dataset.attribute_columns.hat"
    with pytest.raises(ConfigError):
        resolve_labels(table, ["hat"], {"hat": "Wearing_Hat"})


def test_load_directory(tmp_path):
    (tmp_path / "masks").mkdir()
    pd.DataFrame({"id": ["001", "002"], "Eyeglasses": [1, 0]}).to_csv(tmp_path / "attributes.csv", index=False)
    for i, sid in enumerate(["001", "002"]):
        write_raster(tmp_path / "masks" / f"{sid}.png", np.full((4, 4), i + 1, dtype=np.uint8))
        save_rgb(tmp_path / "images" / f"{sid}.png", np.zeros((3, 4, 4), dtype=np.float32))
    samples = load_directory(tmp_path, 3, ["eyeglasses"], {"eyeglasses": "Eyeglasses"}, with_images=True)
    assert [s.id for s in samples] == ["001", "002"]
    assert samples[0].labels.tolist() == [1]
    assert samples[1].mask[2].sum() == 16
    assert samples[0].image.shape == (3, 4, 4)


def test_load_directory_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_directory(tmp_path, 3, ["eyeglasses"], {"eyeglasses": "E"})
    (tmp_path / "masks").mkdir()
    pd.DataFrame({"id": ["x"], "E": [1]}).to_csv(tmp_path / "attributes.csv", index=False)
    write_raster(tmp_path / "masks" / "x.png", np.full((2, 2), 7, dtype=np.uint8))
    with pytest.raises(MaskFormatError):
        load_directory(tmp_path, 3, ["eyeglasses"], {"eyeglasses": "E"})
    write_raster(tmp_path / "masks" / "x.png", np.zeros((2, 2), dtype=np.uint8))
    with pytest.raises(FileNotFoundError):
        load_directory(tmp_path, 3, ["eyeglasses"], {"eyeglasses": "E"}, with_images=True)
