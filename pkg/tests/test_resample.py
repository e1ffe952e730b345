"""Tests for bicubic resampling and rotation warps."""
import numpy as np
import pytest

from rsc_engine.resample import (
    bicubic_resize,
    bicubic_sample,
    cubic_weight,
    degrade,
    resample_matrix,
    warp_rotate,
)


class TestKernel:

    def test_interpolating_at_integers(self):
        np.testing.assert_allclose(cubic_weight(np.array([0.0, 1.0, -1.0, 2.0, 2.5])), [1.0, 0.0, 0.0, 0.0, 0.0])

    def test_partition_of_unity(self):
        for x in (0.1, 0.5, 0.77):
            taps = np.arange(-1, 3)
            assert np.sum(cubic_weight(x - taps)) == pytest.approx(1.0)


class TestResize:

    @pytest.mark.parametrize('sizes', [(16, 16), (16, 5), (5, 16), (64, 7), (7, 2)])
    def test_rows_sum_to_one(self, sizes):
        matrix = resample_matrix(*sizes)
        assert matrix.shape == (sizes[1], sizes[0])
        np.testing.assert_allclose(matrix.sum(axis=1), 1.0)

    def test_same_size_is_identity(self):
        np.testing.assert_allclose(resample_matrix(9, 9), np.eye(9), atol=1e-15)

    def test_output_too_small(self):
        with pytest.raises(ValueError):
            resample_matrix(16, 1)

    def test_constant_image_stays_constant(self):
        out = bicubic_resize(np.full((16, 16), 0.3), 6)
        assert out.shape == (6, 6)
        np.testing.assert_allclose(out, 0.3)

    @pytest.mark.parametrize('out_size', [2, 5, 11, 16, 23])
    def test_commutes_with_constant_offset(self, rng, out_size):
        image = rng.uniform(size=(16, 16))
        for offset in (-3.0, 0.25, 7.5):
            np.testing.assert_allclose(bicubic_resize(image + offset, out_size),
                                       bicubic_resize(image, out_size) + offset, atol=1e-12)

    def test_resizes_trailing_axes_of_a_stack(self, rng):
        out = bicubic_resize(rng.uniform(size=(3, 12, 12)), 5)
        assert out.shape == (3, 5, 5)

    def test_rejects_one_dimensional_input(self):
        with pytest.raises(ValueError):
            bicubic_resize(np.ones(4), 2)


class TestDegrade:

    def test_canonical_size_returns_a_copy(self, rng):
        image = rng.uniform(size=(16, 16))
        out = degrade(image, 16)
        np.testing.assert_array_equal(out, image)
        assert out is not image

    def test_keeps_shape_and_removes_detail(self, rng):
        image = rng.uniform(size=(16, 16))
        out = degrade(image, 4)
        assert out.shape == image.shape
        assert np.std(np.diff(out, axis=1)) < np.std(np.diff(image, axis=1))


class TestWarp:

    def test_sampling_at_pixel_centres_returns_pixels(self, rng):
        image = rng.uniform(size=(6, 6))
        y, x = np.meshgrid(np.arange(6.0), np.arange(6.0), indexing='ij')
        np.testing.assert_allclose(bicubic_sample(image, x, y), image, atol=1e-12)

    def test_zero_angle_is_identity(self, rng):
        image = rng.uniform(size=(16, 16))
        np.testing.assert_allclose(warp_rotate(image, 0.0), image, atol=1e-12)

    def test_quarter_turn_permutes_pixels(self, rng):
        image = rng.uniform(size=(16, 16))
        np.testing.assert_allclose(warp_rotate(image, np.pi / 2), np.rot90(image, -1), atol=1e-9)
