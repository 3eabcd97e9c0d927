"""Image-side preprocessing: canonical resize, pyramid split, mean subtraction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class RasterImage:
    """8-bit RGB image; ``pixels`` has shape ``(height, width, 3)``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ConfigurationError(f"raster must be HxWx3 with H, W >= 1, got {px.shape}")
        if px.dtype != np.uint8:
            raise ConfigurationError(f"raster pixels must be uint8, got {px.dtype}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, RasterImage) and np.array_equal(self.pixels, other.pixels)

    def to_tensor(self) -> np.ndarray:
        """CHW float32 view of the pixel values."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=np.float32)


@dataclass(frozen=True)
class PyramidRegion:
    level: int
    grid_x: int
    grid_y: int
    x0: int
    y0: int
    crop: RasterImage


def _axis_weights(src: int, dst: int):
    # half-pixel centres, clamped to the valid range
    scale = src / dst
    pos = (np.arange(dst, dtype=np.float64) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, src - 1)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, src - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: RasterImage, width: int, height: int) -> RasterImage:
    """Bilinear resize with half-pixel alignment and round-half-up write-back."""
    if width < 1 or height < 1:
        raise ConfigurationError(f"resize target must be >= 1x1, got {width}x{height}")
    if (width, height) == (img.width, img.height):
        return RasterImage(img.pixels.copy())
    src = img.pixels.astype(np.float64)
    y0, y1, fy = _axis_weights(img.height, height)
    x0, x1, fx = _axis_weights(img.width, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    out = np.floor(out + 0.5)
    return RasterImage(np.clip(out, 0, 255).astype(np.uint8))


def region_count(levels: int) -> int:
    return (4 ** levels - 1) // 3


def region_windows(width: int, height: int, levels: int):
    """``(level, gx, gy, x0, y0, w, h)`` for every region, in stream order."""
    if levels < 1:
        raise ConfigurationError(f"pyramid levels must be >= 1, got {levels}")
    cells = 2 ** (levels - 1)
    if width % cells or height % cells:
        raise ConfigurationError(
            f"image {width}x{height} not divisible by {cells} for {levels} pyramid levels"
        )
    out = []
    for level in range(levels):
        n = 2 ** level
        w, h = width // n, height // n
        for gy in range(n):
            for gx in range(n):
                out.append((level, gx, gy, gx * w, gy * h, w, h))
    return out


def split_pyramid(img: RasterImage, levels: int) -> list[PyramidRegion]:
    """Regions ordered by level, then row-major over the grid."""
    regions = []
    for level, gx, gy, x0, y0, w, h in region_windows(img.width, img.height, levels):
        crop = RasterImage(img.pixels[y0:y0 + h, x0:x0 + w].copy())
        regions.append(PyramidRegion(level, gx, gy, x0, y0, crop))
    return regions


def subtract_mean(region: np.ndarray, mean: np.ndarray, offset=(0, 0)) -> np.ndarray:
    """``region - mean`` over the window of ``mean`` starting at ``offset=(x, y)``.

    ``region`` is a CHW tensor, ``mean`` the CHW mean image at canonical size.
    """
    c, h, w = region.shape
    ox, oy = offset
    mc, mh, mw = mean.shape
    if c != mc or ox < 0 or oy < 0 or ox + w > mw or oy + h > mh:
        raise ConfigurationError(
            f"mean window {c}x{h}x{w} at (x={ox}, y={oy}) outside mean image {mean.shape}"
        )
    return (region.astype(np.float32) - mean[:, oy:oy + h, ox:ox + w]).astype(np.float32)


def preprocess(img: RasterImage, mean: np.ndarray, levels: int,
               scale: float = 1.0) -> list[np.ndarray]:
    """Resize to the mean image's size, split, and zero-centre every region.

    Returns one CHW float32 tensor per stream. ``scale`` multiplies the
    centred values.
    """
    _, h, w = mean.shape
    img = resize_bilinear(img, w, h)
    out = []
    for region in split_pyramid(img, levels):
        t = subtract_mean(region.crop.to_tensor(), mean, (region.x0, region.y0))
        if scale != 1.0:
            t *= np.float32(scale)
        out.append(t)
    return out
