from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from skimage.metrics import structural_similarity

from implicit_glyph.kernel import GlyphShapeParams
from implicit_glyph.raster import (
    ImageFormatError,
    RasterImage,
    box_downsample,
    compare,
    encode_pgm,
    l1_metric,
    load_image,
    parse_pgm,
    pixel_centers,
    pixel_to_coord,
    render_hard,
    render_soft,
    save_image,
    ssim,
)

SQUARE = GlyphShapeParams.from_curves(np.array([[
    [0, 0, 0, 1, 0, -0.5],
    [0, 0, 0, -1, 0, -0.5],
    [0, 0, 0, 0, 1, -0.5],
    [0, 0, 0, 0, -1, -0.5],
]], dtype=float))


class TestCoordinates:
    def test_first_pixel(self):
        assert pixel_to_coord(0, 0, 64, 64) == (-63 / 64, -63 / 64)

    def test_last_pixel(self):
        assert pixel_to_coord(63, 63, 64, 64) == (63 / 64, 63 / 64)

    def test_two_by_two(self):
        assert pixel_to_coord(1, 0, 2, 2) == (-0.5, 0.5)

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            pixel_to_coord(64, 0, 64, 64)

    def test_grid_matches_scalar(self):
        g = pixel_centers(5, 7)
        assert tuple(g[3, 2]) == pixel_to_coord(3, 2, 5, 7)


class TestPgm:
    def test_round_trip(self, tmp_path):
        img = RasterImage(np.random.default_rng(0).integers(0, 256, size=(9, 13)) / 255.0)
        save_image(img, tmp_path / "a.pgm")
        back = load_image(tmp_path / "a.pgm")
        assert np.array_equal(back.pixels, img.pixels)

    def test_header_comments(self):
        data = b"P5\n# hello\n2 1\n# more\n255\n" + bytes([0, 255])
        assert parse_pgm(data).pixels.tolist() == [[0.0, 1.0]]

    def test_ascii_rejected(self):
        with pytest.raises(ImageFormatError, match="P5"):
            parse_pgm(b"P2\n1 1\n255\n0\n")

    def test_sixteen_bit_rejected(self):
        with pytest.raises(ImageFormatError, match="8-bit"):
            parse_pgm(b"P5\n1 1\n65535\n\x00\x00")

    def test_truncated_rejected(self):
        with pytest.raises(ImageFormatError):
            parse_pgm(b"P5\n4 4\n255\n" + bytes(10))

    def test_encode_header(self):
        assert encode_pgm(RasterImage(np.ones((2, 3)))).startswith(b"P5\n3 2\n255\n")

    def test_invert(self, tmp_path):
        save_image(RasterImage(np.zeros((2, 2))), tmp_path / "b.pgm")
        assert np.all(load_image(tmp_path / "b.pgm", invert=True).pixels == 1)

    def test_png(self, tmp_path):
        from PIL import Image

        arr = np.array([[0, 128], [255, 64]], dtype=np.uint8)
        Image.fromarray(arr).save(tmp_path / "c.png")
        assert np.array_equal(load_image(tmp_path / "c.png").pixels, arr / 255.0)
        Image.fromarray(np.zeros((2, 2, 3), np.uint8)).save(tmp_path / "d.png")
        with pytest.raises(ImageFormatError):
            load_image(tmp_path / "d.png")

    def test_range_enforced(self):
        with pytest.raises(ValueError):
            RasterImage(np.full((2, 2), 1.5))


class TestRender:
    def test_soft_square(self):
        img = render_soft(SQUARE, 8)
        assert img.pixels[3, 3] == 0.0
        # corner center (-7/8, -7/8): two curves give 3/8 each, so D = 3/4
        assert img.pixels[0, 0] == 0.75
        assert np.all((img.pixels >= 0) & (img.pixels <= 1))

    def test_hard_is_binary_and_pointwise(self):
        big = render_hard(SQUARE, 16)
        assert set(np.unique(big.pixels)) <= {0.0, 1.0}
        # pixel (r, c) only depends on its center: a sub-grid of a finer render agrees
        small = render_hard(SQUARE, 4)
        assert small.pixels[1, 1] == 0.0 and small.pixels[0, 0] == 1.0

    def test_threshold_mode(self):
        a = render_hard(SQUARE, 16, mode="threshold").pixels
        b = render_hard(SQUARE, 16, mode="occupancy").pixels
        # thresholding the soft field keeps all hard ink and adds the corner fill-in
        assert np.all(a[b == 0] == 0)
        assert a[0, 4] == 0 and b[0, 4] == 1
        assert a[0, 0] == 1
        with pytest.raises(ValueError):
            render_hard(SQUARE, 4, mode="nope")

    def test_rectangular(self):
        assert render_soft(SQUARE, 6, 10).pixels.shape == (6, 10)

    def test_box_downsample(self):
        img = RasterImage(np.kron(np.eye(2), np.ones((3, 3))))
        assert box_downsample(img, 3).pixels.tolist() == [[1.0, 0.0], [0.0, 1.0]]
        with pytest.raises(ValueError):
            box_downsample(img, 4)


class TestMetrics:
    def test_identical(self):
        x = np.random.default_rng(0).uniform(size=(64, 64))
        assert ssim(x, x) == 1.0
        assert l1_metric(x, x) == 0.0

    def test_black_vs_white(self):
        c1 = 0.01**2
        assert abs(ssim(np.zeros((64, 64)), np.ones((64, 64))) - c1 / (1 + c1)) <= 1e-8
        assert l1_metric(np.zeros((64, 64)), np.ones((64, 64))) == 255.0

    def test_compare(self):
        rep = compare(np.zeros((16, 16)), np.zeros((16, 16)))
        assert (rep.ssim, rep.l1) == (1.0, 0.0)

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((16, 16)), np.zeros((16, 17)))
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))
        with pytest.raises(ValueError):
            l1_metric(np.zeros(3), np.zeros(4))

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (24, 24), elements=st.floats(0, 1)), arrays(float, (24, 24), elements=st.floats(0, 1)))
    def test_ssim_matches_reference(self, x, y):
        ref = structural_similarity(x, y, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False)
        assert ssim(x, y) == pytest.approx(ref, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (16, 16), elements=st.floats(0, 1)), arrays(float, (16, 16), elements=st.floats(0, 1)))
    def test_symmetry(self, x, y):
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)
        assert l1_metric(x, y) == l1_metric(y, x)
