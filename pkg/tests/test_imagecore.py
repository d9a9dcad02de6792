import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lar_sirr import _pykernels, imagecore
from lar_sirr.imagecore import (
    LAPLACIAN_KERNEL,
    bilinear_resize,
    conv2d,
    edge_map,
    gamma_correct,
    inverse_gamma,
    laplacian_map,
)


def sliding_window_conv(img, kernel, pad_mode):
    """Direct per-pixel oracle: out[y, x] = sum_{u, v} k[u, v] * f[y - u + r, x - v + r]."""
    img = imagecore.as_image(img)
    h, w, c = img.shape
    k = kernel.shape[0]
    r = k // 2
    out = np.zeros_like(img)

    def sample(y, x, ch):
        if 0 <= y < h and 0 <= x < w:
            return img[y, x, ch]
        if pad_mode == "zero":
            return 0.0
        yy = -y if y < 0 else (2 * (h - 1) - y if y >= h else y)
        xx = -x if x < 0 else (2 * (w - 1) - x if x >= w else x)
        return img[yy, xx, ch]

    for y in range(h):
        for x in range(w):
            for ch in range(c):
                acc = 0.0
                for u in range(k):
                    for v in range(k):
                        acc += kernel[u, v] * sample(y - (u - r), x - (v - r), ch)
                out[y, x, ch] = acc
    return out


def ramp(h, w, a=0.03, b=0.05, c=0.1):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return (c + a * yy + b * xx)[:, :, None]


class TestGamma:
    def test_fixed_points(self):
        assert gamma_correct(np.zeros((2, 2)))[0, 0, 0] == 0.0
        assert gamma_correct(np.ones((2, 2)))[0, 0, 0] == 1.0

    def test_value(self):
        out = gamma_correct(np.full((1, 1), 0.25), 2.2)
        assert out[0, 0, 0] == pytest.approx(0.5325205447199813, abs=1e-12)

    def test_round_trip(self):
        assert inverse_gamma(gamma_correct(np.full((1, 1), 0.7)))[0, 0, 0] == pytest.approx(0.7, abs=1e-6)

    def test_round_trip_grid(self):
        grid = np.linspace(0, 1, 256).reshape(16, 16)
        np.testing.assert_allclose(gamma_correct(inverse_gamma(grid))[:, :, 0], grid, atol=1e-6)
        np.testing.assert_allclose(inverse_gamma(gamma_correct(grid))[:, :, 0], grid, atol=1e-6)

    @pytest.mark.parametrize("g", [0.0, -1.0])
    def test_rejects_nonpositive(self, g):
        with pytest.raises(ValueError):
            gamma_correct(np.zeros((2, 2)), g)


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        img = rng.random((9, 7, 3))
        k = np.zeros((3, 3))
        k[1, 1] = 1.0
        np.testing.assert_array_equal(conv2d(img, k), img)

    def test_zero_sum_kernel_on_constant(self):
        out = conv2d(np.full((8, 8, 3), 0.37), LAPLACIAN_KERNEL, "reflect")
        np.testing.assert_allclose(out, 0.0, atol=1e-15)

    def test_box_on_one_hot(self):
        img = np.zeros((7, 7))
        img[3, 3] = 1.0
        box = np.full((3, 3), 1 / 9)
        out = conv2d(img, box, "zero")
        expected = sliding_window_conv(img, box, "zero")
        np.testing.assert_allclose(out, expected, atol=1e-15)
        assert np.allclose(out[2:5, 2:5, 0], 1 / 9)
        assert out.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("mode", ["reflect", "zero"])
    def test_matches_sliding_window_oracle(self, mode):
        rng = np.random.default_rng(1)
        img = rng.random((10, 11, 2))
        k = rng.normal(size=(5, 5))
        np.testing.assert_allclose(conv2d(img, k, mode), sliding_window_conv(img, k, mode), atol=1e-12)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((8, 8)), np.ones((2, 2)))

    def test_unknown_pad(self):
        with pytest.raises(ValueError):
            conv2d(np.zeros((8, 8)), np.ones((3, 3)), "wrap")

    def test_linearity(self):
        rng = np.random.default_rng(2)
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        k = rng.normal(size=(3, 3))
        lhs = conv2d(2.5 * x - 0.7 * y, k)
        rhs = 2.5 * conv2d(x, k) - 0.7 * conv2d(y, k)
        np.testing.assert_allclose(lhs, rhs, atol=1e-6)

    def test_backends_bit_identical(self):
        rng = np.random.default_rng(3)
        padded = rng.random((40, 42, 3))
        k = rng.random((9, 9))
        from lar_sirr import _backend

        np.testing.assert_array_equal(_backend.convolve_padded(padded, k), _pykernels.convolve_padded(padded, k))


class TestBilinear:
    @pytest.mark.parametrize("scale", [0.5, 0.25, 0.125, 2.0])
    def test_constant(self, scale):
        out = bilinear_resize(np.full((16, 16, 3), 0.42), scale=scale)
        np.testing.assert_allclose(out, 0.42, atol=1e-15)

    def test_upscale_rows(self):
        img = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = bilinear_resize(img, size=(2, 4))[:, :, 0]
        # half-pixel centres: sources at x = -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        np.testing.assert_allclose(out, [[0, 0.25, 0.75, 1.0]] * 2)

    def test_ramp_round_trip_interior(self):
        img = ramp(8, 8)
        back = bilinear_resize(bilinear_resize(img, scale=0.5), size=(8, 8))
        assert np.abs(back - img)[1:-1, 1:-1].max() <= 1e-6

    def test_ramp_downscale_exact(self):
        img = ramp(8, 8)
        down = bilinear_resize(img, scale=0.5)
        yy, xx = np.mgrid[0:4, 0:4] * 2 + 0.5
        np.testing.assert_allclose(down[:, :, 0], 0.1 + 0.03 * yy + 0.05 * xx, atol=1e-12)

    def test_zero_target(self):
        with pytest.raises(ValueError):
            bilinear_resize(np.zeros((4, 4)), size=(0, 4))

    def test_matches_torch_convention(self):
        import torch
        import torch.nn.functional as F

        rng = np.random.default_rng(4)
        img = rng.random((16, 24, 3))
        t = torch.from_numpy(img).permute(2, 0, 1)[None]
        for size in [(8, 12), (4, 6), (2, 3), (32, 48)]:
            ref = F.interpolate(t, size=size, mode="bilinear", align_corners=False)[0].permute(1, 2, 0).numpy()
            np.testing.assert_allclose(bilinear_resize(img, size=size), ref, atol=1e-12)


class TestLaplacianMap:
    def test_constant(self):
        np.testing.assert_array_equal(laplacian_map(np.full((8, 8, 3), 0.6)), 0.0)

    def test_one_hot(self):
        img = np.zeros((7, 7, 3))
        img[3, 3, 1] = 1.0
        raw = imagecore.laplacian_response(img)
        assert raw[3, 3, 0] == 4.0
        out = laplacian_map(img)
        assert out[3, 3, 0] == 1.0
        assert out[2, 3, 0] == pytest.approx(0.25)
        assert out.shape == (7, 7, 1)

    def test_affine_ramp(self):
        np.testing.assert_allclose(laplacian_map(ramp(12, 10)), 0.0, atol=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range(self, seed):
        img = np.random.default_rng(seed).random((9, 9, 3))
        out = laplacian_map(img)
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestEdgeMap:
    def test_constant(self):
        np.testing.assert_array_equal(edge_map(np.full((8, 8, 3), 0.2)), 0.0)

    def test_step(self):
        img = np.zeros((6, 6))
        img[:, 3:] = 1.0
        out = edge_map(img)[:, :, 0]
        np.testing.assert_array_equal(out[:, 2], 1.0)
        np.testing.assert_array_equal(np.delete(out, 2, axis=1), 0.0)

    def test_ramp(self):
        np.testing.assert_allclose(edge_map(ramp(8, 9)), 1.0, atol=1e-12)


def test_grayscale_channels_identical():
    img = np.random.default_rng(5).random((5, 5, 3))
    g = imagecore.to_grayscale(img)
    assert np.array_equal(g[:, :, 0], g[:, :, 1]) and np.array_equal(g[:, :, 1], g[:, :, 2])


def test_pad_to_multiple_and_crop():
    img = np.random.default_rng(6).random((13, 21, 3))
    padded, size = imagecore.pad_to_multiple(img, 8)
    assert padded.shape == (16, 24, 3)
    np.testing.assert_array_equal(imagecore.crop_to(padded, size), img)


def test_png_round_trip(tmp_path):
    img = np.random.default_rng(7).integers(0, 256, size=(6, 5, 3)) / 255.0
    imagecore.write_png(tmp_path / "a.png", img)
    np.testing.assert_array_equal(imagecore.read_png(tmp_path / "a.png"), img)
