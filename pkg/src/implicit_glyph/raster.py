"""Raster images: PGM I/O, pixel coordinates, rendering and image metrics.

Pixels are floats in [0, 1] with ink = 0 and background = 1.  Pixel
``(r, c)`` of an ``H x W`` grid samples the point at its center:
``x = (2c + 1)/W - 1``, ``y = (2r + 1)/H - 1``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from .kernel import DEFAULT_W_MIN, GlyphShapeParams, eval_shape_soft, occupancy_hard

# Bounds the number of curve evaluations held in memory at once while rendering.
_RENDER_BLOCK = 1 << 22


class ImageFormatError(ValueError):
    pass


@dataclass
class RasterImage:
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"expected a non-empty 2-D pixel grid, got shape {self.pixels.shape}")
        if not np.all((self.pixels >= 0) & (self.pixels <= 1)):
            raise ValueError("pixel values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_bytes(self) -> np.ndarray:
        return np.rint(self.pixels * 255).astype(np.uint8)


def _read_token(data: bytes, pos: int) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        if data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def parse_pgm(data: bytes) -> RasterImage:
    """Decode a binary (P5) 8-bit PGM."""
    magic, pos = _read_token(data, 0)
    if magic != b"P5":
        raise ImageFormatError(f"not a binary grayscale PGM: magic {magic[:2]!r}, expected b'P5'")
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _read_token(data, pos)
        if not tok.isdigit():
            raise ImageFormatError(f"malformed PGM header: bad {name} {tok!r}")
        fields.append(int(tok))
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise ImageFormatError(f"malformed PGM header: size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported PGM depth: maxval {maxval}, only 8-bit (255) is accepted")
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise ImageFormatError("malformed PGM header: missing separator before raster")
    pos += 1
    raster = data[pos:]
    if len(raster) != width * height:
        raise ImageFormatError(f"PGM raster holds {len(raster)} bytes, header promises {width * height}")
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(height, width)
    return RasterImage(pixels / 255.0)


def encode_pgm(img: RasterImage) -> bytes:
    return b"P5\n%d %d\n255\n" % (img.width, img.height) + img.to_bytes().tobytes()


def load_image(path, invert: bool = False) -> RasterImage:
    """Read a P5 PGM (or a grayscale PNG).  ``invert`` flips white-on-black data."""
    path = Path(path)
    data = path.read_bytes()
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        img = _load_png(path)
    else:
        img = parse_pgm(data)
    if invert:
        img = RasterImage(1.0 - img.pixels)
    return img


def _load_png(path: Path) -> RasterImage:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("L", "1", "LA", "I;16"):
            raise ImageFormatError(f"PNG mode {im.mode} is not grayscale")
        if im.mode == "I;16":
            arr = np.asarray(im, dtype=float) / 65535.0
        else:
            arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    return RasterImage(arr)


def save_image(img: RasterImage, path) -> None:
    """Write a P5 PGM atomically."""
    atomic_write(path, encode_pgm(img))


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def pixel_to_coord(r: int, c: int, H: int, W: int) -> tuple[float, float]:
    if not (0 <= r < H and 0 <= c < W):
        raise IndexError(f"pixel ({r}, {c}) outside a {H}x{W} grid")
    return (2 * c + 1) / W - 1, (2 * r + 1) / H - 1


def pixel_centers(H: int, W: int) -> np.ndarray:
    """Normalized centers of every pixel, shape (H, W, 2) as (x, y)."""
    xs = (2 * np.arange(W) + 1) / W - 1
    ys = (2 * np.arange(H) + 1) / H - 1
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y], axis=-1)


def _render_rows(fn, params: GlyphShapeParams, H: int, W: int) -> np.ndarray:
    out = np.empty((H, W))
    rows = max(1, _RENDER_BLOCK // max(1, W * params.v * params.p))
    xs = (2 * np.arange(W) + 1) / W - 1
    for r0 in range(0, H, rows):
        r1 = min(H, r0 + rows)
        ys = (2 * np.arange(r0, r1) + 1) / H - 1
        X, Y = np.meshgrid(xs, ys)
        out[r0:r1] = fn(np.stack([X, Y], axis=-1))
    return out


def render_soft(params: GlyphShapeParams, H: int, W: int | None = None) -> RasterImage:
    """Soft occupancy sampled at pixel centers."""
    W = H if W is None else W
    return RasterImage(_render_rows(lambda pts: eval_shape_soft(params, pts), params, H, W))


def render_hard(
    params: GlyphShapeParams,
    H: int,
    W: int | None = None,
    w_min: float = DEFAULT_W_MIN,
    mode: str = "occupancy",
) -> RasterImage:
    """Binary render; every pixel depends only on the query at its center.

    ``mode="occupancy"`` uses the sigma-oriented, weight-filtered hard field;
    ``mode="threshold"`` thresholds the soft field at 0.5 instead.
    """
    W = H if W is None else W
    if mode == "occupancy":
        fn = lambda pts: np.where(occupancy_hard(params, pts, w_min), 0.0, 1.0)
    elif mode == "threshold":
        fn = lambda pts: np.where(eval_shape_soft(params, pts) < 0.5, 0.0, 1.0)
    else:
        raise ValueError(f"unknown hard render mode {mode!r}")
    return RasterImage(_render_rows(fn, params, H, W))


def box_downsample(img: RasterImage, factor: int) -> RasterImage:
    H, W = img.pixels.shape
    if H % factor or W % factor:
        raise ValueError(f"{H}x{W} is not divisible by {factor}")
    blocks = img.pixels.reshape(H // factor, factor, W // factor, factor)
    return RasterImage(blocks.mean(axis=(1, 3)))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    ssim: float
    l1: float


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, RasterImage) else np.asarray(img, dtype=float)


def _gaussian_window() -> np.ndarray:
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    return k / k.sum()


def _filter_valid(x: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = len(win) // 2
    y = correlate1d(correlate1d(x, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over all fully-covered 11x11 Gaussian windows."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def l1_metric(a, b) -> float:
    """Mean absolute difference on the 0-255 scale."""
    x, y = _pixels(a), _pixels(b)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    return float(np.mean(np.abs(x - y)) * 255)


def compare(a, b) -> MetricReport:
    return MetricReport(ssim(a, b), l1_metric(a, b))
