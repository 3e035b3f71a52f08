import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from lesioncascade.data import (
    Sample,
    SynthConfig,
    _Blob,
    apply_geometry,
    augment,
    generate_splits,
    generate_synthetic,
    geometry_source_coords,
    load_isic,
    preprocess,
    rasterize,
    write_dataset,
)
from lesioncascade.metrics import roc_auc


@pytest.fixture(scope="module")
def default_train():
    return generate_synthetic(SynthConfig(), "train")


def small_config(**kw):
    base = dict(train_per_class=3, test_per_class=2, image_size=32, radius_range=(6, 9), center_jitter=2)
    base.update(kw)
    return SynthConfig(**base)


def test_determinism():
    a = generate_synthetic(small_config(), "train")
    b = generate_synthetic(small_config(), "train")
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.mask.tobytes() == y.mask.tobytes()
        assert (x.id, x.label) == (y.id, y.label)
    c = generate_synthetic(small_config(seed=43), "train")
    assert a[0].image.tobytes() != c[0].image.tobytes()


def test_splits_are_disjoint_and_balanced():
    train, test = generate_splits(small_config())
    assert len(train) == 6 and len(test) == 4
    assert [s.label for s in train] == [0, 1] * 3
    assert not {s.image.tobytes() for s in train} & {s.image.tobytes() for s in test}


def test_lesion_fraction_over_500_samples():
    cfg = SynthConfig(train_per_class=250)
    for s in generate_synthetic(cfg, "train"):
        frac = s.mask.mean()
        assert 0.05 <= frac <= 0.60, (s.id, frac)
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_zero_amplitude_gives_ellipse():
    blob = _Blob(cx=31.5, cy=30.0, a=14.0, b=9.0, angle=0.6, harmonics=[(3, 0.0, 1.0)])
    mask = rasterize(blob, 64)
    yy, xx = np.mgrid[0:64, 0:64]
    u = (xx - blob.cx) * np.cos(blob.angle) + (yy - blob.cy) * np.sin(blob.angle)
    v = -(xx - blob.cx) * np.sin(blob.angle) + (yy - blob.cy) * np.cos(blob.angle)
    level = (u / blob.a) ** 2 + (v / blob.b) ** 2
    inside, outside = level < 0.9, level > 1.1  # away from the 1-pixel boundary band
    assert mask[inside].all() and not mask[outside].any()
    np.testing.assert_array_equal(mask[~(inside | outside) & (level <= 1)], True)


def test_mean_color_is_a_weak_classifier(default_train):
    labels = np.array([s.label for s in default_train])
    best = 0.0
    for c in range(3):
        for values in ([s.image[c].mean() for s in default_train], [s.image[c][s.mask].mean() for s in default_train]):
            auc = roc_auc(np.array(values), labels).auc
            best = max(best, auc, 1 - auc)
    assert best < 0.95


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(image_size=48).validate()
    with pytest.raises(ValueError):
        SynthConfig(melanoma_amplitude=(0.03, 0.1)).validate()
    with pytest.raises(ValueError):
        SynthConfig(image_size=32).validate()  # default lesions do not fit


def test_write_and_load_round_trip(tmp_path):
    samples = generate_synthetic(small_config(), "train")
    write_dataset(samples, tmp_path)
    loaded = load_isic(tmp_path)
    assert [s.id for s in loaded] == sorted(s.id for s in samples)
    by_id = {s.id: s for s in samples}
    for s in loaded:
        ref = by_id[s.id]
        np.testing.assert_array_equal(s.mask, ref.mask)
        assert s.label == ref.label
        assert np.abs(s.image - ref.image).max() <= 0.5 / 255 + 1e-12


def test_mask_binarization_at_128(tmp_path):
    (tmp_path / "img.ppm").write_bytes(b"")
    Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "img.ppm")
    raw = np.array([[0, 255, 127, 128]] * 4, np.uint8)
    Image.fromarray(raw, mode="L").save(tmp_path / "img_segmentation.png")
    (tmp_path / "labels.csv").write_text("image_id,melanoma,extra\nimg,1,x\n")
    (s,) = load_isic(tmp_path)
    np.testing.assert_array_equal(s.mask, raw >= 128)
    assert s.label == 1 and s.image.shape == (3, 4, 4)


def test_missing_pieces_are_reported(tmp_path, caplog):
    samples = generate_synthetic(small_config(train_per_class=2), "train")
    write_dataset(samples, tmp_path)
    (tmp_path / "masks" / f"{samples[0].id}_segmentation.png").unlink()
    lines = (tmp_path / "labels.csv").read_text().splitlines()
    (tmp_path / "labels.csv").write_text("\n".join(l for l in lines if not l.startswith(samples[1].id)) + "\n")
    errors = []
    with caplog.at_level(logging.WARNING):
        loaded = load_isic(tmp_path, errors)
    assert len(loaded) == 2
    assert len(errors) == 2 and "missing mask" in errors[0] and "no label" in errors[1]


def test_empty_and_missing_directory(tmp_path, caplog):
    with caplog.at_level(logging.WARNING):
        assert load_isic(tmp_path) == []
    assert "no images" in caplog.text
    with pytest.raises(FileNotFoundError):
        load_isic(tmp_path / "nope")


def test_unreadable_image_raises(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"not an image")
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(tmp_path / "bad_segmentation.png")
    (tmp_path / "labels.csv").write_text("image_id,melanoma\nbad,0\n")
    with pytest.raises(OSError):
        load_isic(tmp_path)


def _sample(h, w, seed=0):
    rng = np.random.default_rng(seed)
    mask = np.zeros((h, w), bool)
    mask[h // 4 : 3 * h // 4, w // 3 : 2 * w // 3] = True
    return Sample(image=rng.random((3, h, w)), mask=mask, label=1, id="x")


def test_preprocess_sizes():
    big = _sample(768, 1024)
    out = preprocess(big)
    assert out.image.shape == (3, 384, 512) and out.valid_hw == (384, 512)
    ratio = out.mask.mean() / big.mask.mean()
    assert abs(ratio - 1) < 0.02
    small = _sample(64, 64)
    same = preprocess(small)
    np.testing.assert_array_equal(same.image, small.image)
    assert same.valid_hw == (64, 64)
    odd = preprocess(_sample(50, 70))
    assert odd.image.shape == (3, 64, 96) and odd.valid_hw == (50, 70)
    assert not odd.mask[50:].any() and np.all(odd.image[:, :, 70:] == 0)


def test_geometry_identity_and_involution():
    s = generate_synthetic(small_config(), "train")[1]
    ident = apply_geometry(s)
    np.testing.assert_allclose(ident.image, s.image, atol=1e-12)
    np.testing.assert_array_equal(ident.mask, s.mask)
    twice = apply_geometry(apply_geometry(s, hflip=True), hflip=True)
    np.testing.assert_allclose(twice.image, s.image, atol=1e-12)
    np.testing.assert_array_equal(twice.mask, s.mask)
    np.testing.assert_array_equal(apply_geometry(s, vflip=True).mask, s.mask[::-1])


def test_geometry_applies_same_transform_to_image_and_mask():
    # encode each pixel's coordinates in the image planes; the warped planes
    # must then equal the source coordinates used for the mask
    h = w = 32
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = Sample(image=np.stack([yy / 100, xx / 100, np.zeros((h, w))]), mask=np.ones((h, w), bool), label=0, id="g")
    for hflip, vflip, scale in [(True, False, 1.2), (False, True, 0.9), (True, True, 1.1)]:
        out = apply_geometry(grid, hflip, vflip, scale)
        sy, sx = geometry_source_coords((h, w), hflip, vflip, scale)
        inside = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
        np.testing.assert_allclose(out.image[0][inside], sy[inside] / 100, atol=1e-9)
        np.testing.assert_allclose(out.image[1][inside], sx[inside] / 100, atol=1e-9)
        near = (np.round(sy) >= 0) & (np.round(sy) <= h - 1) & (np.round(sx) >= 0) & (np.round(sx) <= w - 1)
        np.testing.assert_array_equal(out.mask, near)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=200, deadline=None)
def test_augment_preserves_label_and_binarity(seed):
    s = _AUG_SOURCE
    out = augment(s, np.random.default_rng(seed))
    assert out.label == s.label and out.id == s.id
    assert out.mask.dtype == bool and out.mask.shape == s.mask.shape
    assert out.image.shape == s.image.shape
    assert out.image.min() >= 0 and out.image.max() <= 1


_AUG_SOURCE = generate_synthetic(small_config(train_per_class=1), "train")[1]
