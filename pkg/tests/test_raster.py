import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from goldendie.errors import DataError, DimensionError, RegionError
from goldendie.raster import (DefectLabels, PatchRegion, as_cad, decode_binary, encode_binary,
                              extract_patch, load_binary, load_dataset, load_photo,
                              load_quantized, save_binary, save_photo, save_quantized,
                              shift_raster, split_patches, tile_regions, write_dataset)


def _cad(rng, h, w, k=5):
    return np.where(rng.random((h, w, k)) < 0.5, -1, 1).astype(np.int8)


def test_split_640_gives_70_30(rng):
    train, val = split_patches((640, 640), 64, 0.7, seed=1)
    assert len(train) == 70 and len(val) == 30
    assert not set(train) & set(val)
    assert set(train) | set(val) == set(tile_regions(640, 640, 64))


def test_split_deterministic():
    assert split_patches((512, 384), 64, 0.7, 9) == split_patches((512, 384), 64, 0.7, 9)
    assert split_patches((512, 384), 64, 0.7, 9) != split_patches((512, 384), 64, 0.7, 10)


def test_split_patch_too_large():
    with pytest.raises(RegionError):
        split_patches((32, 32), 64)


@given(h=st.integers(64, 700), w=st.integers(64, 700), frac=st.floats(0.05, 0.95),
       seed=st.integers(0, 2**31))
def test_split_partitions_cropped_grid(h, w, frac, seed):
    train, val = split_patches((h, w), 64, frac, seed)
    n = (h // 64) * (w // 64)
    assert len(train) + len(val) == n
    assert abs(len(train) - frac * n) <= 1
    assert not set(train) & set(val)
    assert all(r.fits(h, w) for r in train + val)


def test_partial_edge_tiles_dropped():
    tiles = tile_regions(130, 200, 64)
    assert len(tiles) == 2 * 3
    assert max(r.x0 + r.w for r in tiles) == 192


def test_extract_patch(rng):
    img = rng.random((20, 30, 3))
    assert np.array_equal(extract_patch(img, PatchRegion(0, 0, 30, 20)), img)
    assert np.array_equal(extract_patch(img, PatchRegion(0, 0, 1, 1))[0, 0], img[0, 0])
    with pytest.raises(RegionError):
        extract_patch(img, PatchRegion(25, 0, 10, 10))


def test_binary_encoding_involution():
    v = np.array([-1, 1, 1, -1], np.int8)
    assert np.array_equal(decode_binary(encode_binary(v)), v)
    b = np.array([0, 1, 0], np.uint8)
    assert np.array_equal(encode_binary(decode_binary(b)), b)


def test_as_cad_rejects_zero():
    with pytest.raises(ValueError):
        as_cad(np.zeros((4, 4, 2)))


@given(arrays(np.uint8, (9, 7, 3)))
def test_photo_roundtrip_8bit(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("p") / "x.png"
    photo = data / 255.0
    save_photo(path, photo)
    assert np.array_equal(load_photo(path), photo)


def test_binary_and_quantized_roundtrip(tmp_path, rng):
    layer = _cad(rng, 17, 13, 1)[..., 0]
    save_binary(tmp_path / "l.png", layer)
    assert np.array_equal(load_binary(tmp_path / "l.png"), layer)
    q = rng.integers(0, 64, (11, 12)).astype(np.uint8)
    save_quantized(tmp_path / "q.png", q)
    assert np.array_equal(load_quantized(tmp_path / "q.png"), q)


def test_dataset_roundtrip(tmp_path, rng):
    photo = np.round(rng.random((32, 40, 3)) * 255) / 255
    cad = _cad(rng, 32, 40)
    labels = DefectLabels.empty((32, 40))
    where = np.zeros((32, 40), bool)
    where[3:6, 4:9] = True
    labels.mark("dust", where)
    manifest = write_dataset(tmp_path, "t", photo, cad, labels)
    ds = load_dataset(manifest)
    assert ds.cad.shape[2] == 5
    assert np.array_equal(ds.photo, photo) and np.array_equal(ds.cad, cad)
    assert np.array_equal(ds.labels.mask, labels.mask)
    assert ds.labels.is_consistent()


def test_dataset_without_labels(tmp_path, rng):
    manifest = write_dataset(tmp_path, "t", rng.random((8, 8, 3)), _cad(rng, 8, 8))
    assert load_dataset(manifest).labels is None


def test_dataset_dimension_mismatch(tmp_path, rng):
    manifest = write_dataset(tmp_path, "t", rng.random((100, 101, 3)), _cad(rng, 100, 101, 2))
    save_binary(tmp_path / "layer_1.png", _cad(rng, 100, 100, 1)[..., 0])
    with pytest.raises(DimensionError, match="layer_1"):
        load_dataset(manifest)


def test_dataset_missing_file(tmp_path, rng):
    manifest = write_dataset(tmp_path, "t", rng.random((8, 8, 3)), _cad(rng, 8, 8, 1))
    (tmp_path / "photo.png").unlink()
    with pytest.raises(DataError):
        load_dataset(manifest)


def test_non_binary_layer_rejected(tmp_path, rng):
    from PIL import Image
    manifest = write_dataset(tmp_path, "t", rng.random((8, 8, 3)), _cad(rng, 8, 8, 1))
    Image.fromarray(np.full((8, 8), 128, np.uint8), mode="L").save(tmp_path / "layer_0.png")
    with pytest.raises(DataError):
        load_dataset(manifest)


def test_manifest_is_json(tmp_path, rng):
    manifest = write_dataset(tmp_path, "t", rng.random((8, 8, 3)), _cad(rng, 8, 8, 2),
                             split_seed=4, split_fraction=0.6)
    raw = json.loads(manifest.read_text())
    assert raw["layers"] == ["layer_0.png", "layer_1.png"]
    assert raw["split_seed"] == 4 and raw["split_fraction"] == 0.6


def test_labels_union_of_classes():
    a = -np.ones((4, 4), np.int8)
    b = a.copy()
    a[0, 0] = 1
    b[3, 3] = 1
    labels = DefectLabels.from_classes({"dust": a, "resist": b})
    assert labels.positive.sum() == 2 and labels.is_consistent()


def test_shift_raster_direction():
    img = np.arange(12).reshape(3, 4)
    out = shift_raster(img, 1, 0)
    assert np.array_equal(out[:, 1:], img[:, :-1])
    assert np.array_equal(shift_raster(img, 0, 0), img)
