"""Image buffers, NetPBM I/O, noise synthesis, and quality metrics.

Pixels live as floats in [0, 1], stored row-major and channel-interleaved.
Values are clamped and quantized only at I/O boundaries; in particular,
synthetic noise is left unclamped so its distribution stays Gaussian during
training.  PSNR and SSIM quantize both operands to 8 bits first, matching
the usual benchmark convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import Tensor
from .rng import Rng


class DataError(Exception):
    """Malformed image files or invalid image geometry."""


@dataclass
class ImageBuffer:
    """H x W x C float image, C in {1, 3}."""

    pixels: np.ndarray  # float32 [H, W, C]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] not in (1, 3):
            raise DataError(f"bad image shape {self.pixels.shape}")
        if min(self.pixels.shape[:2]) < 1:
            raise DataError("image dims must be >= 1")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]


def quantize(img: ImageBuffer) -> np.ndarray:
    """round(clamp(v, 0, 1) * 255) as uint8; the only lossy step in I/O."""
    return np.round(np.clip(img.pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def _read_header_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping # comments."""
    tokens: list[bytes] = []
    i = 0
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise DataError("truncated NetPBM header")
        tokens.append(blob[start:i])
    return tokens, i


def load_image(path) -> ImageBuffer:
    """Read a binary NetPBM file (P5 gray / P6 color, maxval 255)."""
    blob = Path(path).read_bytes()
    tokens, pos = _read_header_tokens(blob, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported NetPBM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
    except ValueError:
        raise DataError("non-numeric NetPBM header field") from None
    if maxval != 255:
        raise DataError(f"unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise DataError("image dims must be >= 1")
    channels = 1 if magic == b"P5" else 3
    payload = blob[pos + 1:]  # single whitespace byte separates header and raster
    expected = width * height * channels
    if len(payload) < expected:
        raise DataError(f"truncated payload: {len(payload)} < {expected} bytes")
    raster = np.frombuffer(payload[:expected], dtype=np.uint8)
    pixels = (raster.astype(np.float32) / 255.0).reshape(height, width, channels)
    return ImageBuffer(pixels)


def save_image(path, img: ImageBuffer) -> None:
    """Write a binary P5/P6 file with a canonical header."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (img.width, img.height)
    Path(path).write_bytes(header + quantize(img).tobytes())


def add_awgn(img: ImageBuffer, sigma: float, rng: Rng) -> ImageBuffer:
    """Add white Gaussian noise with std ``sigma`` on the 8-bit scale.

    The result is intentionally not clamped; clamping happens at save time.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return ImageBuffer(img.pixels.copy())
    noise = rng.normal(img.pixels.size).reshape(img.pixels.shape) * (sigma / 255.0)
    return ImageBuffer(img.pixels + noise.astype(np.float32))


def sample_patch(img: ImageBuffer, size: int, rng: Rng) -> ImageBuffer:
    """Uniformly random aligned size x size crop; row offset drawn first."""
    if img.height < size or img.width < size:
        raise DataError(f"image {img.height}x{img.width} smaller than patch {size}")
    oy = rng.below(img.height - size + 1)
    ox = rng.below(img.width - size + 1)
    return ImageBuffer(img.pixels[oy:oy + size, ox:ox + size].copy())


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """Peak signal-to-noise ratio in dB after 8-bit quantization.

    Identical images yield +inf.
    """
    if a.pixels.shape != b.pixels.shape:
        raise DataError(f"psnr: shape mismatch {a.pixels.shape} vs {b.pixels.shape}")
    qa = quantize(a).astype(np.float64)
    qb = quantize(b).astype(np.float64)
    mse = np.mean((qa - qb) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a: ImageBuffer, b: ImageBuffer, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity over valid Gaussian windows.

    Both images are quantized to 8 bits first, then compared in the float
    domain with dynamic range 1.0; channels are averaged.
    """
    if a.pixels.shape != b.pixels.shape:
        raise DataError(f"ssim: shape mismatch {a.pixels.shape} vs {b.pixels.shape}")
    if a.height < window or a.width < window:
        raise DataError(f"ssim: image smaller than {window}x{window} window")
    x = quantize(a).astype(np.float64) / 255.0
    y = quantize(b).astype(np.float64) / 255.0
    kernel = _gaussian_window(window, sigma)
    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2

    def filt(img: np.ndarray) -> np.ndarray:
        # valid-mode Gaussian filtering per channel
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(img, (window, window), axis=(0, 1))
        return np.einsum("hwcuv,uv->hwc", win, kernel)

    mu_x = filt(x)
    mu_y = filt(y)
    xx = filt(x * x) - mu_x * mu_x
    yy = filt(y * y) - mu_y * mu_y
    xy = filt(x * y) - mu_x * mu_y
    score = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / ((mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2))
    return float(score.mean())


def to_tensor(img: ImageBuffer) -> Tensor:
    """[H, W, C] buffer -> [1, C, H, W] engine tensor."""
    return Tensor(np.ascontiguousarray(img.pixels.transpose(2, 0, 1))[None])


def from_tensor(t: Tensor) -> ImageBuffer:
    """[1, C, H, W] tensor -> buffer; values are left unclamped."""
    if t.ndim != 4 or t.shape[0] != 1:
        raise ValueError("from_tensor expects a [1, C, H, W] tensor")
    return ImageBuffer(np.ascontiguousarray(t.data[0].transpose(1, 2, 0)))
