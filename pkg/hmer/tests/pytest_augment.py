# SPDX-FileCopyrightText: 2025 hmer contributors

# SPDX-License-Identifier: Apache-2.0

import numpy as np
import pytest

from hmer import augment
from hmer.augment import AugmentConfig
from hmer.dataio import EOS, Sample


def test_scale_identity(rng):
    img = rng.random((37, 81)).astype(np.float32)
    out = augment.scale_image(img, 1.0)
    assert np.array_equal(out, img)
    assert out is not img


def test_scale_doubles_dims():
    assert augment.scale_image(np.zeros((100, 300)), 2.0).shape == (200, 600)
    assert augment.scaled_size(3, 5, 0.5) == (2, 3)
    assert augment.scaled_size(1, 1, 0.1) == (1, 1)


def test_scale_keeps_constant_image():
    out = augment.scale_image(np.full((40, 60), 0.7, dtype=np.float32), 0.5)
    assert out.shape == (20, 30)
    assert np.allclose(out, 0.7, atol=1e-5)


def test_scale_rejects_non_positive():
    with pytest.raises(ValueError):
        augment.scale_image(np.zeros((4, 4)), 0.0)


def test_zero_pad():
    full = np.ones((256, 1024), dtype=np.float32)
    assert np.array_equal(augment.zero_pad(full, 256, 1024), full)

    small = np.arange(64, dtype=np.float32).reshape(8, 8) / 64
    assert augment.zero_pad(small, 256, 1024).sum() == pytest.approx(small.sum())

    out = augment.zero_pad(np.ones((100, 300)), 256, 1024)
    rows, cols = np.nonzero(out)
    assert rows.min() == 0 and rows.max() == 99
    assert cols.min() == 0 and cols.max() == 299

    with pytest.raises(ValueError):
        augment.zero_pad(np.ones((300, 10)), 256, 1024)


def test_zero_pad_center_anchor():
    out = augment.zero_pad(np.ones((2, 4)), 6, 8, anchor='center')
    rows, cols = np.nonzero(out)
    assert (rows.min(), rows.max(), cols.min(), cols.max()) == (2, 3, 2, 5)


def test_fit_to_canvas_downscales_oversize():
    out = augment.fit_to_canvas(np.ones((512, 512), dtype=np.float32), 256, 1024)
    assert out.shape == (256, 1024)
    assert np.allclose(out[:, :256], 1.0, atol=1e-5)
    assert not out[:, 256:].any()


def test_fit_to_canvas_pads_small(rng):
    img = rng.random((10, 10)).astype(np.float32)
    out = augment.fit_to_canvas(img, 256, 1024)
    assert np.array_equal(out[:10, :10], img)
    assert out.sum() == pytest.approx(img.sum(), rel=1e-6)


def test_fixed_height_normalization():
    tall = np.ones((256, 100), dtype=np.float32)
    assert np.array_equal(augment.normalize_fixed_height(tall, 256, 256, 1024), augment.zero_pad(tall, 256, 1024))

    assert augment.scale_image(np.ones((128, 200)), 256 / 128).shape == (256, 400)
    out = augment.normalize_fixed_height(np.ones((128, 200), dtype=np.float32), 256, 256, 1024)
    rows, cols = np.nonzero(out > 0.5)
    assert rows.max() == 255 and cols.max() == 399

    heights = set()
    for h in (40, 97):
        out = augment.normalize_fixed_height(np.ones((h, 50), dtype=np.float32), 64, 256, 1024)
        heights.add(int((out > 0.5).any(axis=1).sum()))
    assert heights == {64}


def test_pad_only_matches_fit_to_canvas(rng):
    cfg = AugmentConfig(mode=augment.PAD_ONLY, canvas_h=64, canvas_w=128)
    img = rng.random((30, 200)).astype(np.float32)
    expected = augment.fit_to_canvas(img, 64, 128)
    assert np.array_equal(augment.apply_training_augment(img, cfg, rng), expected)
    assert np.array_equal(augment.prepare_test_image(img, cfg), expected)


def test_scale_statistics():
    cfg = AugmentConfig()
    rng = np.random.default_rng(0)
    ks = np.array([augment.sample_scale(cfg, rng) for _ in range(10_000)])
    assert ks.min() >= 0.5 and ks.max() <= 2.0
    assert abs(ks.mean() - 1.25) < 0.02


def test_scale_sequence_is_seeded():
    cfg = AugmentConfig()
    first = [augment.sample_scale(cfg, np.random.default_rng(9)) for _ in range(3)]
    a, b = np.random.default_rng(9), np.random.default_rng(9)
    assert [augment.sample_scale(cfg, a) for _ in range(5)] == [augment.sample_scale(cfg, b) for _ in range(5)]
    assert len(set(first)) == 1


def test_training_augment_always_fills_canvas(rng):
    cfg = AugmentConfig(canvas_h=64, canvas_w=256)
    for shape in ((60, 250), (10, 10), (64, 20)):
        img = np.ones(shape, dtype=np.float32)
        assert augment.apply_training_augment(img, cfg, rng).shape == (64, 256)


def test_fixed_height_mode_uses_target(rng):
    cfg = AugmentConfig(mode=augment.FIXED_HEIGHT, canvas_h=64, canvas_w=256, target_height=32)
    out = augment.apply_training_augment(np.ones((16, 16), dtype=np.float32), cfg, rng)
    assert int((out > 0.5).any(axis=1).sum()) == 32
    assert np.array_equal(out, augment.prepare_test_image(np.ones((16, 16), dtype=np.float32), cfg))


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(k_min=2.0, k_max=0.5)
    with pytest.raises(ValueError):
        AugmentConfig(mode='stretch')
    with pytest.raises(ValueError):
        AugmentConfig(anchor='bottom')
    assert AugmentConfig(canvas_h=32, canvas_w=64).canvas == (32, 64)


def test_rescale_samples_keeps_labels(rng):
    samples = [Sample(np.ones((20, 40), dtype=np.float32), ['x', EOS], 'a'),
               Sample(np.ones((10, 10), dtype=np.float32), ['y', EOS], 'b')]
    scaled = augment.rescale_samples(samples, AugmentConfig(k_min=2.0, k_max=2.0), rng)
    assert [s.image.shape for s in scaled] == [(40, 80), (20, 20)]
    assert [s.label for s in scaled] == [s.label for s in samples]
    assert samples[0].image.shape == (20, 40)


def _random_image(rng, max_h=200, max_w=700):
    shape = (int(rng.integers(1, max_h + 1)), int(rng.integers(1, max_w + 1)))
    return rng.uniform(0.1, 1.0, size=shape).astype(np.float32)


def test_scaled_dims_within_one_pixel(rng):
    for _ in range(300):
        img = _random_image(rng)
        k = float(rng.uniform(0.5, 2.0))
        new_h, new_w = augment.scale_image(img, k).shape
        assert abs(new_h - k * img.shape[0]) <= 1.0, (img.shape, k)
        assert abs(new_w - k * img.shape[1]) <= 1.0, (img.shape, k)


def test_scale_augment_is_zero_outside_content(rng):
    cfg = AugmentConfig()
    for seed in range(100):
        img = _random_image(rng)
        k = augment.sample_scale(cfg, np.random.default_rng(seed))
        out = augment.apply_training_augment(img, cfg, np.random.default_rng(seed))
        assert out.shape == (256, 1024)

        h, w = augment.scaled_size(img.shape[0], img.shape[1], k)
        if h > 256 or w > 1024:
            h, w = augment.scaled_size(h, w, min(256 / h, 1024 / w))
        h, w = min(h, 256), min(w, 1024)
        assert np.all(out[:h, :w] > 0), (img.shape, k)
        assert not out[h:].any() and not out[:, w:].any(), (img.shape, k)


def test_unit_scale_range_equals_pad_only(rng):
    unit = AugmentConfig(mode=augment.SCALE_AUGMENT, k_min=1.0, k_max=1.0, canvas_h=128, canvas_w=512)
    pad_only = AugmentConfig(mode=augment.PAD_ONLY, canvas_h=128, canvas_w=512)
    for _ in range(100):
        img = _random_image(rng)
        assert np.array_equal(augment.apply_training_augment(img, unit, rng),
                              augment.apply_training_augment(img, pad_only, rng))
