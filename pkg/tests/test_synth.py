import numpy as np
import pytest

from goldendie.errors import ConfigError
from goldendie.raster import DefectLabels, PatchRegion
from goldendie.synth import (LAYER_NAMES, SynthConfig, SynthScene, burn_letters, defect_counts,
                             generate, inject_dust, inject_nitride, inject_resist, render)


def _canvas(size=128, seed=0):
    rng = np.random.default_rng(seed)
    photo = np.full((size, size, 3), 0.5)
    return photo, DefectLabels.empty((size, size)), rng


def test_size_below_minimum():
    with pytest.raises(ConfigError):
        generate(SynthConfig(size=64))


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        SynthConfig(rate_dust=-1).validate()
    with pytest.raises(ConfigError):
        SynthConfig(letter_defect_fraction=1.5).validate()
    with pytest.raises(ConfigError):
        SynthConfig.from_mapping({"colour": "red"})


def test_from_mapping_parses_strings():
    cfg = SynthConfig.from_mapping({"size": "512", "rate_dust": "3.5"})
    assert cfg.size == 512 and cfg.rate_dust == 3.5


def test_shapes_and_domains(small_wafer):
    photo, cad, labels, report = small_wafer
    assert photo.shape == (256, 256, 3) and cad.shape == (256, 256, 5)
    assert photo.min() >= 0 and photo.max() <= 1
    assert set(np.unique(cad)) <= {-1, 1}
    assert labels.is_consistent()
    assert set(report.defects) == {"dust", "nitride", "resist", "letters"}


def test_deterministic():
    cfg = SynthConfig(size=256, seed=11)
    a, b = generate(cfg), generate(cfg)
    assert np.array_equal(a.photo, b.photo) and np.array_equal(a.cad, b.cad)
    assert np.array_equal(a.labels.mask, b.labels.mask)
    assert not np.array_equal(a.photo, generate(SynthConfig(size=256, seed=12)).photo)


def test_no_defects_gives_empty_mask():
    r = generate(SynthConfig(size=256, seed=2, rate_dust=0, rate_nitride=0, rate_resist=0,
                             letter_defect_fraction=0))
    assert np.all(r.labels.mask == -1)


def test_clean_render_matches_zero_rate_generation():
    kw = dict(size=256, seed=5, noise_sigma=0.0)
    defective = generate(SynthConfig(**kw))
    clean = generate(SynthConfig(rate_dust=0, rate_nitride=0, rate_resist=0,
                                 letter_defect_fraction=0, **kw))
    assert np.array_equal(clean.photo, clean.golden)
    assert np.array_equal(clean.golden, defective.golden)
    assert np.array_equal(clean.cad, defective.cad)


def test_label_soundness_without_noise():
    r = generate(SynthConfig(size=384, seed=8, noise_sigma=0.0, rate_dust=100,
                             rate_nitride=50, rate_resist=50, letter_defect_fraction=0.5))
    changed = np.any(r.photo != r.golden, axis=2)
    assert r.labels.positive.any()
    assert np.array_equal(changed, r.labels.positive)


def test_context_dependent_colors(small_wafer):
    # identical CAD vectors, different clean colors (trace border)
    cad, golden = small_wafer.cad, small_wafer.golden
    codes = ((cad > 0) * (1 << np.arange(5))).sum(axis=2)
    trace_only = codes == 1
    colors = np.unique(golden[trace_only], axis=0)
    assert len(colors) >= 2


def test_every_layer_used():
    cad = generate(SynthConfig(size=1024, seed=1)).cad
    assert len(LAYER_NAMES) == 5
    for i in range(5):
        assert (cad[..., i] == 1).any()


def test_dust_rate_10000_per_mpx():
    cfg = SynthConfig(size=1000, seed=4, rate_dust=10000.0)
    count = defect_counts(cfg)["dust"]
    assert abs(count - 10000) <= 3 * np.sqrt(10000)
    r = generate(SynthConfig(size=1000, seed=4, rate_dust=10000.0, rate_nitride=0,
                             rate_resist=0, letter_defect_fraction=0))
    assert r.report.defects["dust"] == count
    assert abs(r.report.defects["dust"] - 10000) <= 3 * np.sqrt(10000)


def test_resist_poisson_mean_over_seeds():
    counts = [defect_counts(SynthConfig(size=2000, seed=s, rate_resist=8.0))["resist"]
              for s in range(200)]
    assert abs(np.mean(counts) - 32.0) <= 3 * np.sqrt(32.0 / 200)


def test_report_matches_counts():
    cfg = SynthConfig(size=256, seed=21, rate_dust=300)
    assert {k: v for k, v in generate(cfg).report.defects.items() if k != "letters"} == \
        defect_counts(cfg)


@pytest.mark.parametrize("inject", [inject_dust, inject_nitride, inject_resist])
def test_injector_zero_count_is_noop(inject):
    photo, labels, rng = _canvas()
    before = photo.copy()
    inject(photo, labels, 0, rng)
    assert np.array_equal(photo, before) and not labels.positive.any()


@pytest.mark.parametrize("inject", [inject_dust, inject_nitride, inject_resist])
@pytest.mark.parametrize("seed", range(5))
def test_injector_labels_equal_pixel_diff(inject, seed):
    photo, labels, rng = _canvas(seed=seed)
    before = photo.copy()
    inject(photo, labels, 6, rng)
    assert np.array_equal(np.any(photo != before, axis=2), labels.positive)


@pytest.mark.parametrize("seed", range(20))
def test_single_dust_size(seed):
    photo, labels, rng = _canvas(seed=seed)
    inject_dust(photo, labels, 1, rng)
    assert 1 <= labels.positive.sum() <= 16


@pytest.mark.parametrize("seed", range(10))
def test_nitride_blob_diameter(seed):
    photo, labels, rng = _canvas(256, seed)
    inject_nitride(photo, labels, 1, np.random.default_rng(seed))
    ys, xs = np.nonzero(labels.positive)
    extent = max(ys.max() - ys.min(), xs.max() - xs.min()) + 1
    if ys.min() > 0 and xs.min() > 0 and ys.max() < 255 and xs.max() < 255:
        assert 8 <= extent <= 52  # radius up to 20 with bounded ripple


def _glyph_scene(n):
    layers = {name: np.zeros((256, 256), bool) for name in LAYER_NAMES}
    boxes = [PatchRegion(10 * (i % 20) + 2, 24 * (i // 20) + 2, 8, 20) for i in range(n)]
    for b in boxes:
        layers["text"][b.slices] = True
    return SynthScene(256, layers, boxes)


def test_burn_fraction_zero_one_and_twenty_percent():
    scene = _glyph_scene(100)
    for fraction, expected in ((0.0, 0), (1.0, 100), (0.2, 20)):
        photo = render(scene)
        labels = DefectLabels.empty((256, 256))
        burn_letters(photo, labels, scene, fraction, np.random.default_rng(1))
        hit = [labels.positive[b.slices].any() for b in scene.glyph_boxes]
        assert sum(hit) == expected


def test_burn_bad_fraction():
    scene = _glyph_scene(3)
    with pytest.raises(ConfigError):
        burn_letters(render(scene), DefectLabels.empty((256, 256)), scene, 1.2,
                     np.random.default_rng(0))


def test_misalignment_shifts_photo_and_labels():
    kw = dict(size=256, seed=6, noise_sigma=0.0)
    base, moved = generate(SynthConfig(**kw)), generate(SynthConfig(misalignment_px=2, **kw))
    assert np.array_equal(moved.photo[:, 2:], base.photo[:, :-2])
    assert np.array_equal(moved.labels.mask[:, 2:], base.labels.mask[:, :-2])
    assert np.array_equal(moved.cad, base.cad)
