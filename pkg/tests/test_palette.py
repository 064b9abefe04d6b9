import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from goldendie.errors import DataError
from goldendie.palette import (Palette, brute_force_path, fit_palette, kmeans, order_palette,
                               path_cost, quantize, reconstruct)
from goldendie.synth import SynthConfig, generate

unit_colors = arrays(np.float64, st.tuples(st.integers(3, 12), st.just(3)),
                     elements=st.floats(0, 1, allow_nan=False))


@pytest.fixture(scope="module")
def wafer_photo():
    return generate(SynthConfig(size=256, seed=7)).photo


def test_four_colors_recovered_exactly():
    colors = np.array([[0.1, 0.2, 0.3], [0.9, 0.1, 0.1], [0.5, 0.5, 0.5], [0.0, 1.0, 0.2]])
    photo = colors[np.random.default_rng(0).integers(0, 4, (20, 20))]
    pal = fit_palette(photo, k=4, seed=0)
    assert sorted(map(tuple, pal.centroids)) == sorted(map(tuple, colors))
    assert np.abs(reconstruct(quantize(photo, pal), pal) - photo).max() == 0


def test_fewer_colors_than_k_repaired():
    photo = np.zeros((6, 6, 3))
    photo[:3] = 1.0
    pal = fit_palette(photo, k=8, seed=0)
    assert pal.k == 8
    assert len(np.unique(pal.centroids, axis=0)) == 8
    assert np.array_equal(reconstruct(quantize(photo, pal), pal), photo)


def test_fit_deterministic(wafer_photo):
    a = fit_palette(wafer_photo, k=16, sample_size=20000, seed=3)
    b = fit_palette(wafer_photo, k=16, sample_size=20000, seed=3)
    assert np.array_equal(a.centroids, b.centroids)


def test_k64_beats_k8(wafer_photo):
    errs = {}
    for k in (8, 64):
        pal = fit_palette(wafer_photo, k=k, sample_size=30000, seed=0)
        errs[k] = np.mean((reconstruct(quantize(wafer_photo, pal), pal) - wafer_photo) ** 2)
    assert errs[64] < errs[8]


def test_palette_invariants(wafer_photo):
    pal = fit_palette(wafer_photo, k=64, sample_size=30000, seed=1)
    assert pal.k == 64
    assert len(np.unique(pal.centroids, axis=0)) == 64
    assert pal.centroids.min() >= 0 and pal.centroids.max() <= 1
    assert pal.order_cost == pytest.approx(path_cost(pal.centroids))


def test_kmeans_objective_non_increasing(wafer_photo):
    pts = wafer_photo.reshape(-1, 3)[::7]
    _, _, history = kmeans(pts, 12, np.random.default_rng(0))
    assert len(history) > 2
    assert all(b <= a * (1 + 1e-12) for a, b in zip(history, history[1:]))


def test_order_collinear():
    pal = order_palette([[0, 0, 0], [1, 1, 1], [0.5, 0.5, 0.5]])
    assert np.array_equal(pal.centroids[1], [0.5, 0.5, 0.5])
    assert pal.order_cost == pytest.approx(np.sqrt(3))


@pytest.mark.parametrize("seed", range(10))
def test_order_matches_brute_force_for_8(seed):
    pts = np.random.default_rng(seed).random((8, 3))
    _, best = brute_force_path(pts)
    assert order_palette(pts).order_cost == pytest.approx(best, rel=1e-12)


@settings(max_examples=200)
@given(unit_colors)
def test_order_is_permutation_and_no_worse(pts):
    pal = order_palette(pts)
    assert sorted(map(tuple, pal.centroids)) == sorted(map(tuple, pts))
    assert pal.order_cost <= path_cost(pts) + 1e-12
    n = len(pts)
    # mean adjacent distance is the path cost over n - 1 steps
    assert pal.order_cost / (n - 1) <= path_cost(pts) / (n - 1) + 1e-12


def test_quantize_constant_centroid():
    pal = Palette(np.random.default_rng(2).random((10, 3)))
    photo = np.broadcast_to(pal.centroids[7], (5, 6, 3))
    assert np.all(quantize(photo, pal) == 7)


def test_quantize_ties_lowest_index():
    pal = Palette([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [0.0, 0.0, 1.0]])  # all equidistant
    photo = np.full((1, 1, 3), 0.5)
    assert quantize(photo, pal)[0, 0] == 0


@pytest.mark.parametrize("seed", range(5))
def test_quantize_matches_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    pal = Palette(rng.random((64, 3)))
    photo = rng.random((16, 16, 3))
    q = quantize(photo, pal)
    for y in range(16):
        for x in range(16):
            d = [np.sum((photo[y, x] - c) ** 2) for c in pal.centroids]
            assert q[y, x] == int(np.argmin(d))


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_quantize_reconstruct_idempotent(seed):
    rng = np.random.default_rng(seed)
    pal = Palette(rng.random((16, 3)))
    q = rng.integers(0, 16, (9, 9))
    assert np.array_equal(quantize(reconstruct(q, pal), pal), q)


def test_reconstruct_zero_map_and_range():
    pal = Palette(np.random.default_rng(0).random((64, 3)))
    out = reconstruct(np.zeros((3, 4), int), pal)
    assert np.all(out == pal.centroids[0])
    with pytest.raises(IndexError):
        reconstruct(np.full((2, 2), 64), pal)


def test_round_trip_error_non_increasing_in_k(wafer_photo):
    errs = []
    for k in (8, 16, 32, 64):
        pal = fit_palette(wafer_photo, k=k, sample_size=30000, seed=0)
        errs.append(np.mean((reconstruct(quantize(wafer_photo, pal), pal) - wafer_photo) ** 2))
    assert all(b <= a for a, b in zip(errs, errs[1:]))


def test_text_format_round_trip(tmp_path):
    pal = order_palette(np.round(np.random.default_rng(4).random((64, 3)), 6))
    path = pal.save(tmp_path / "palette.txt")
    lines = path.read_text().splitlines()
    assert len(lines) == 64 and lines[0].split()[0] == "0"
    assert all(len(v.split(".")[1]) == 6 for v in lines[5].split()[1:])
    loaded = Palette.load(path)
    assert np.array_equal(loaded.centroids, pal.centroids)
    assert loaded.sha256() == pal.sha256()


def test_bad_palette_file(tmp_path):
    (tmp_path / "p.txt").write_text("0 0.1 0.2 0.3\n2 0.1 0.1 0.1\n")
    with pytest.raises(DataError):
        Palette.load(tmp_path / "p.txt")
    with pytest.raises(DataError):
        Palette.load(tmp_path / "missing.txt")


def test_fit_rejects_bad_arguments(wafer_photo):
    with pytest.raises(ValueError):
        fit_palette(wafer_photo, k=1)
    with pytest.raises(ValueError):
        fit_palette(wafer_photo, sample_size=10**9)
