import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from goldendie import defectmap as D
from goldendie import metrics as M
from goldendie.errors import ConfigError, DimensionError, EvaluationError
from goldendie.synth import SynthConfig, generate


@pytest.fixture(scope="module")
def clean_pair():
    r = generate(SynthConfig(size=256, seed=9, noise_sigma=0.0, rate_dust=300,
                             rate_nitride=60, rate_resist=60, letter_defect_fraction=0.3))
    return r


def test_pixelwise_examples():
    a = np.random.default_rng(0).random((6, 7, 3))
    assert np.all(D.score_pixelwise(a, a).scores == 0)
    b = a.copy()
    b[2, 3, 1] = a[2, 3, 1] + 0.5 if a[2, 3, 1] < 0.5 else a[2, 3, 1] - 0.5
    s = D.score_pixelwise(a, b).scores
    assert s[2, 3] == pytest.approx(0.25 / 3)
    assert np.count_nonzero(s) == 1
    assert D.score_pixelwise(a, b, "l1").scores[2, 3] == pytest.approx(0.5 / 3)
    with pytest.raises(ConfigError):
        D.score_pixelwise(a, b, "ssim")
    with pytest.raises(DimensionError):
        D.score_pixelwise(a, b[:5])


def test_pixelwise_max_inside_dust():
    kw = dict(size=256, seed=4, noise_sigma=0.0, rate_nitride=0, rate_resist=0,
              letter_defect_fraction=0)
    r = generate(SynthConfig(rate_dust=100, **kw))
    s = D.score_pixelwise(r.photo, r.golden).scores
    y, x = np.unravel_index(np.argmax(s), s.shape)
    assert r.labels.per_class["dust"][y, x] == 1


def _covering_oracle(a, b, win, stride, fn):
    h, w = a.shape[:2]
    ys = list(range(0, h - win + 1, stride))
    xs = list(range(0, w - win + 1, stride))
    if ys[-1] != h - win:
        ys.append(h - win)
    if xs[-1] != w - win:
        xs.append(w - win)
    out = np.zeros((h, w))
    for py in range(h):
        for px in range(w):
            vals = [fn(a[y:y + win, x:x + win], b[y:y + win, x:x + win])
                    for y in ys for x in xs if y <= py < y + win and x <= px < x + win]
            out[py, px] = np.mean(vals)
    return out


@pytest.mark.parametrize("metric,fn", [
    ("l2", M.l2), ("l1", M.l1), ("ssim_dissim", lambda p, q: 1 - M.ssim(p, q))])
def test_windowed_matches_exhaustive_oracle(metric, fn):
    rng = np.random.default_rng(1)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    got = D.score_windowed(a, b, metric, window=8, stride=1).scores
    assert np.allclose(got, _covering_oracle(a, b, 8, 1, fn), atol=1e-12)


def test_windowed_edge_flush_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((13, 11, 3)), rng.random((13, 11, 3))
    got = D.score_windowed(a, b, "l2", window=5, stride=3).scores
    assert np.allclose(got, _covering_oracle(a, b, 5, 3, M.l2), atol=1e-12)


def test_windowed_identity_and_piecewise_constant():
    rng = np.random.default_rng(3)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert np.all(D.score_windowed(a, a, "ssim_dissim", 8, 4).scores == pytest.approx(0, abs=1e-12))
    s = D.score_windowed(a, b, "l2", window=4, stride=4).scores
    blocks = s.reshape(4, 4, 4, 4).transpose(0, 2, 1, 3).reshape(16, 16)
    assert np.all(blocks == blocks[:, :1])
    with pytest.raises(DimensionError):
        D.score_windowed(a, b, "l2", window=20)
    with pytest.raises(ConfigError):
        D.score_windowed(a, b, "psnr", window=4)


def test_binarize_examples():
    s = np.array([[0.0, 0.05], [0.1, 0.2]])
    assert not D.binarize(s, 1.0).any()
    assert D.binarize(s, 0.0).sum() == 3
    assert D.binarize(s).tolist() == [[False, False], [False, True]]
    with pytest.raises(ConfigError):
        D.binarize(s, -0.1)


@settings(max_examples=300)
@given(arrays(np.float64, (8, 8), elements=st.floats(0, 1)), st.floats(0, 1), st.floats(0, 1))
def test_binarize_nested(s, t1, t2):
    lo, hi = sorted((t1, t2))
    assert np.all(D.binarize(s, hi) <= D.binarize(s, lo))


def test_ap_perfect_and_ties():
    labels = np.array([1, 1, -1, -1, -1])
    assert D.average_precision(np.array([0.9, 0.8, 0.1, 0.2, 0.0]), labels) == 1.0
    # one tie block holding everything: precision 2/5 at recall 1
    assert D.average_precision(np.zeros(5), labels) == pytest.approx(0.4)
    pr = D.precision_recall(np.array([1.0, 1.0, 0.0]), np.array([1, -1, -1]))
    assert pr.average_precision == pytest.approx(0.5)
    assert pr.thresholds.tolist() == [1.0, 0.0]


def test_ap_hand_computed():
    scores = np.array([0.9, 0.8, 0.7, 0.6, 0.5])
    labels = np.array([1, -1, 1, -1, 1])
    # (1/3)(1 + 2/3 + 3/5)
    assert D.average_precision(scores, labels) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3)


def test_ap_random_scores_near_prevalence():
    rng = np.random.default_rng(0)
    labels = np.where(rng.random((100, 100)) < 0.1, 1, -1)
    prev = np.mean(labels == 1)
    aps = np.array([D.average_precision(rng.random((100, 100)), labels) for _ in range(100)])
    assert abs(aps.mean() - prev) <= 3 * aps.std(ddof=1) / np.sqrt(len(aps)) + 1e-3


def test_ap_without_positives():
    with pytest.raises(EvaluationError):
        D.average_precision(np.ones((3, 3)), -np.ones((3, 3)))


@settings(max_examples=300)
@given(arrays(np.int64, 30, elements=st.integers(0, 1000)),
       arrays(np.bool_, 30).filter(lambda m: m.any()))
def test_ap_invariant_to_monotone_transform(scores, mask):
    scores = scores / 100.0
    labels = np.where(mask, 1, -1)
    a = D.average_precision(scores, labels)
    assert D.average_precision(np.sqrt(scores) * 3 + 1, labels) == pytest.approx(a, abs=1e-12)
    pr = D.precision_recall(scores, labels)
    assert np.all(np.diff(pr.thresholds) < 0)
    assert np.all(np.diff(pr.recall) >= 0)  # recall grows as the threshold falls
    assert 0 <= pr.average_precision <= 1


def test_oracle_ap_is_one(clean_pair):
    s = D.score_pixelwise(clean_pair.photo, clean_pair.golden)
    assert D.average_precision(s, clean_pair.labels) == 1.0


def test_hallucination_lowers_ap(clean_pair):
    sim = clean_pair.golden.copy()
    free = clean_pair.labels.mask < 0
    # first fully unlabeled 32x32 block
    for y in range(0, 224, 16):
        for x in range(0, 224, 16):
            if free[y:y + 32, x:x + 32].all():
                break
        else:
            continue
        break
    base = D.average_precision(D.score_pixelwise(clean_pair.photo, sim), clean_pair.labels)
    sim[y:y + 32, x:x + 32] = 1.0 - clean_pair.golden[y:y + 32, x:x + 32].mean(axis=(0, 1))
    after = D.average_precision(D.score_pixelwise(clean_pair.photo, sim), clean_pair.labels)
    assert after < base


def test_misalignment_probe_aligned_and_shifted():
    kw = dict(size=256, seed=1, noise_sigma=0.02)
    aligned = generate(SynthConfig(**kw))
    shift, before, after = D.misalignment_probe(aligned.photo, aligned.golden, 3)
    assert shift == (0, 0) and after == before
    moved = generate(SynthConfig(misalignment_px=2, **kw))
    shift, before, after = D.misalignment_probe(moved.photo, moved.golden, 3)
    assert shift == (-2, 0) and after < before


def test_misalignment_probe_never_worse():
    rng = np.random.default_rng(0)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    _, before, after = D.misalignment_probe(a, b, 2)
    assert after <= before
    with pytest.raises(ConfigError):
        D.misalignment_probe(a, b, -1)


def test_smooth_keeps_constant():
    s = D.ScoreMap(np.full((5, 5), 0.3))
    assert np.allclose(D.smooth(s).scores, 0.3)


def test_exports(tmp_path, clean_pair):
    s = D.score_pixelwise(clean_pair.photo, clean_pair.golden)
    png, sidecar = D.export_score_png(tmp_path / "score.png", s)
    with Image.open(png) as img:
        assert img.mode.startswith("I") and img.size == (256, 256)
        raw = np.asarray(img)
    assert raw.max() == 65535
    assert "vmax" in sidecar.read_text()
    back = D.load_score_png(png)
    assert np.allclose(back.scores, s.scores, atol=s.scores.max() / 65535)
    D.save_heatmap(tmp_path / "heat.png", s)
    D.save_triptych(tmp_path / "tri.png", clean_pair.photo, clean_pair.golden, D.binarize(s))
    with Image.open(tmp_path / "tri.png") as img:
        assert img.size == (3 * 256 + 8, 256)
    with Image.open(tmp_path / "heat.png") as img:
        assert img.mode == "RGB"
