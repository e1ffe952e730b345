"""Tests for scene sampling, rasterization, pyramids and augmentation."""
import numpy as np
import pytest

from rsc_engine import synth
from rsc_engine.synth import (
    AugmentationConfig,
    SceneConfig,
    SynthesisError,
    augment,
    degrade_to,
    flip_sample,
    generate_sample,
    has_3d_fraction,
    make_pyramid,
    rasterize,
    relabel,
    rotate_params,
    sample_scene,
    sharpness,
    summary,
)
from rsc_engine.utils import STREAM_AUGMENT, STREAM_SCENE, derive_rng


class TestConfigs:

    def test_bad_depth_range(self):
        with pytest.raises(SynthesisError):
            SceneConfig(depth_min=60.0, depth_max=50.0)

    @pytest.mark.parametrize('kwargs', [{'flip_prob': 1.5}, {'noise_sigma': -0.1}, {'rotation_deg': -5.0}])
    def test_bad_augmentation(self, kwargs):
        with pytest.raises(SynthesisError):
            AugmentationConfig(**kwargs)

    def test_identity(self):
        assert AugmentationConfig().is_identity
        assert not AugmentationConfig(brightness=0.1).is_identity


class TestScenes:

    def test_keypoints_in_frame(self, model, camera, scheme):
        config = SceneConfig()
        for seed in range(5):
            scene = sample_scene(seed, model, camera, scheme.canonical_size, config)
            assert np.all(scene.joints2d >= config.margin)
            assert np.all(scene.joints2d <= scheme.canonical_size - config.margin)
            assert np.all(scene.joints3d[:, 2] + scene.params.delta[2] > 0)

    def test_same_seed_same_scene(self, model, camera, scheme):
        a = sample_scene(11, model, camera, scheme.canonical_size)
        b = sample_scene(11, model, camera, scheme.canonical_size)
        np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())

    def test_label_fraction_extremes(self, model, camera, scheme):
        assert not sample_scene(0, model, camera, scheme.canonical_size, p3d=0.0).has_3d
        assert sample_scene(0, model, camera, scheme.canonical_size, p3d=1.0).has_3d

    def test_impossible_frame(self, model, camera, scheme):
        config = SceneConfig(margin=scheme.canonical_size, max_attempts=3)
        with pytest.raises(SynthesisError):
            sample_scene(0, model, camera, scheme.canonical_size, config)

    def test_raster_range(self, model, camera, scheme):
        scene = sample_scene(2, model, camera, scheme.canonical_size)
        image = rasterize(scene, model, scheme.canonical_size, camera, rng=2)
        assert image.shape == (16, 16)
        assert image.min() >= 0.0 and image.max() <= 1.0


class TestPyramid:

    def test_first_range_is_exact_copy(self, scheme, rng):
        x1 = rng.uniform(size=(16, 16))
        rasters, sizes = make_pyramid(x1, scheme, rng)
        assert rasters.shape == (scheme.num_ranges, 16, 16)
        np.testing.assert_array_equal(rasters[0], x1)
        assert sizes[0] == 16

    def test_sizes_fall_in_their_ranges(self, samples, scheme):
        for sample in samples:
            for index, size in enumerate(sample.sizes, start=1):
                lo, hi = scheme.range_bounds(index)
                assert lo <= size <= hi

    def test_lower_resolutions_lose_detail(self, samples):
        sample = samples[0]
        assert sharpness(degrade_to(sample.canonical, 3)) < sharpness(sample.canonical)

    def test_generation_is_deterministic(self, model, scheme, camera):
        a = generate_sample(5, 9, model, scheme, camera)
        b = generate_sample(5, 9, model, scheme, camera)
        np.testing.assert_array_equal(a.rasters, b.rasters)
        assert a.sizes == b.sizes
        np.testing.assert_array_equal(a.scene.joints2d, b.scene.joints2d)

    def test_summary(self, samples):
        fraction = has_3d_fraction(samples)
        assert 0.0 <= fraction <= 1.0
        assert summary(samples) == {'count': len(samples), 'has_3d_fraction': fraction}
        assert has_3d_fraction([]) == 0.0


class TestAugmentation:

    def test_flip_mirrors_rasters_and_labels(self, samples, model, camera, scheme):
        sample = samples[1]
        flipped = flip_sample(sample, model, camera)
        np.testing.assert_array_equal(flipped.rasters, sample.rasters[..., ::-1])

        permutation = list(model.mirror_permutation)
        size = scheme.canonical_size
        expected = np.stack([size - sample.scene.joints2d[:, 0], sample.scene.joints2d[:, 1]], axis=1)
        np.testing.assert_allclose(flipped.scene.joints2d[permutation], expected, atol=1e-6)

    def test_rotation_rotates_labels_about_centre(self, samples, model, camera, scheme):
        sample = samples[2]
        angle = 0.3
        scene = relabel(sample.scene, rotate_params(sample.scene.params, model, angle), model, camera)
        centre = scheme.canonical_size / 2.0
        c, s = np.cos(angle), np.sin(angle)
        expected = (sample.scene.joints2d - centre) @ np.array([[c, -s], [s, c]]).T + centre
        np.testing.assert_allclose(scene.joints2d, expected, atol=1e-6)

    def test_identity_returns_same_sample(self, samples, model, camera, rng):
        assert augment(samples[0], AugmentationConfig(), rng, model, camera) is samples[0]

    def test_certain_flip(self, samples, model, camera, rng):
        out = augment(samples[3], AugmentationConfig(flip_prob=1.0), rng, model, camera)
        np.testing.assert_array_equal(out.rasters, samples[3].rasters[..., ::-1])

    def test_rotation_keeps_labels_in_frame(self, samples, model, camera, rng, scheme):
        config = AugmentationConfig(rotation_deg=15.0, noise_sigma=0.02, brightness=0.1, contrast=0.1)
        for sample in samples[:4]:
            out = augment(sample, config, rng, model, camera)
            assert out.rasters.shape == sample.rasters.shape
            assert out.rasters.min() >= 0.0 and out.rasters.max() <= 1.0
            assert np.all(out.scene.joints2d >= 0.0)
            assert np.all(out.scene.joints2d <= scheme.canonical_size)
            assert out.sizes == sample.sizes

    def test_augmentation_leaves_source_untouched(self, samples, model, camera, rng):
        before = samples[4].rasters.copy()
        augment(samples[4], AugmentationConfig(noise_sigma=0.1, flip_prob=1.0), rng, model, camera)
        np.testing.assert_array_equal(samples[4].rasters, before)

    def test_rejected_draws_redraw_flip_and_rotation(self, samples, model, camera, rng, monkeypatch):
        verdicts = iter([False, False, True])
        calls = []

        def fake_in_frame(joints2d, canonical_size, margin=0.0):
            calls.append(joints2d.copy())
            return next(verdicts)

        monkeypatch.setattr(synth, 'in_frame', fake_in_frame)
        config = AugmentationConfig(rotation_deg=10.0, flip_prob=0.5, max_rotation_attempts=5)
        out = augment(samples[1], config, rng, model, camera)
        assert len(calls) == 3
        np.testing.assert_array_equal(out.scene.joints2d, calls[-1])

    def test_exhausted_draws_raise(self, samples, model, camera, rng, monkeypatch):
        monkeypatch.setattr(synth, 'in_frame', lambda joints2d, canonical_size, margin=0.0: False)
        config = AugmentationConfig(rotation_deg=10.0, max_rotation_attempts=4)
        with pytest.raises(SynthesisError, match='4 flip/rotation draws'):
            augment(samples[1], config, rng, model, camera)


class TestFrameSweeps:

    def test_thousand_scenes_stay_in_frame(self, model, camera, scheme):
        config = SceneConfig()
        size = scheme.canonical_size
        has_3d = []
        for source_id in range(1000):
            scene = sample_scene(derive_rng(0, STREAM_SCENE, source_id), model, camera, size, config, p3d=0.5)
            assert config.margin <= scene.joints2d.min() and scene.joints2d.max() <= size - config.margin
            has_3d.append(scene.has_3d)
        assert 0.45 <= np.mean(has_3d) <= 0.55

    def test_thousand_augmented_samples_stay_in_frame(self, samples, model, camera, scheme):
        config = AugmentationConfig(rotation_deg=15.0, flip_prob=0.5, noise_sigma=0.02, brightness=0.1)
        size = scheme.canonical_size
        for draw in range(125):
            for sample in samples:
                out = augment(sample, config, derive_rng(0, STREAM_AUGMENT, draw, sample.source_id), model, camera)
                assert 0.0 <= out.scene.joints2d.min() and out.scene.joints2d.max() <= size

