"""CFA pattern definitions, mosaicking and sensor-domain noise.

Channel encoding is R=0, G=1, B=2 throughout. Images are H x W x 3 float
arrays in [0, 1]; mosaics are H x W planes tagged with their pattern.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

R, G, B = 0, 1, 2

_BAYER_TILE = np.array([[R, G], [G, B]], dtype=np.int64)
_QUAD_TILE = np.array(
    [
        [R, R, G, G],
        [R, R, G, G],
        [G, G, B, B],
        [G, G, B, B],
    ],
    dtype=np.int64,
)


class CfaPattern(enum.Enum):
    BAYER_RGGB = "bayer"
    QUAD_BAYER = "quad"

    @property
    def tile(self) -> np.ndarray:
        t = _BAYER_TILE if self is CfaPattern.BAYER_RGGB else _QUAD_TILE
        return t.copy()

    @property
    def period(self) -> int:
        return self.tile.shape[0]

    def channel_at(self, y: int, x: int) -> int:
        t = self.tile
        return int(t[y % t.shape[0], x % t.shape[1]])

    def index_grid(self, height: int, width: int) -> np.ndarray:
        """Channel index of every site of an ``height x width`` sensor."""
        _check_dims(self, height, width)
        t = self.tile
        reps = (height // t.shape[0], width // t.shape[1])
        return np.tile(t, reps)

    @classmethod
    def parse(cls, value: "str | CfaPattern") -> "CfaPattern":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {
            "bayer": cls.BAYER_RGGB,
            "bayer_rggb": cls.BAYER_RGGB,
            "rggb": cls.BAYER_RGGB,
            "quad": cls.QUAD_BAYER,
            "quad_bayer": cls.QUAD_BAYER,
            "quadbayer": cls.QUAD_BAYER,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown CFA pattern {value!r}; expected 'bayer' or 'quad'") from None


class CfaSizeError(ValueError):
    """Image dimensions are not a multiple of the CFA tile size."""


def _check_dims(pattern: CfaPattern, height: int, width: int) -> None:
    p = pattern.period
    if height <= 0 or width <= 0 or height % p or width % p:
        raise CfaSizeError(
            f"{height}x{width} is not a multiple of the {p}x{p} {pattern.name} tile"
        )


@dataclass(frozen=True)
class NoiseSpec:
    """Gaussian noise level on the 8-bit scale (applied as ``sigma / 255``)."""

    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError(f"noise sigma must be a finite value >= 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class MosaicImage:
    plane: np.ndarray
    pattern: CfaPattern

    def __post_init__(self):
        plane = np.asarray(self.plane)
        if plane.ndim != 2:
            raise ValueError(f"mosaic plane must be 2-D, got shape {plane.shape}")
        _check_dims(self.pattern, *plane.shape)
        if plane.size and (plane.min() < 0.0 or plane.max() > 1.0):
            raise ValueError("mosaic values must lie in [0, 1]")
        object.__setattr__(self, "plane", plane)

    @property
    def shape(self) -> tuple[int, int]:
        return self.plane.shape


def _check_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return image


def cfa_mask(pattern: CfaPattern, height: int, width: int) -> np.ndarray:
    """One-hot ``H x W x 3`` mask: ``mask[y, x, c] == 1`` iff site (y, x) samples c."""
    grid = pattern.index_grid(height, width)
    return (grid[..., None] == np.arange(3)).astype(np.float64)


def mosaic(image: np.ndarray, pattern: CfaPattern) -> MosaicImage:
    """Sample an RGB image through ``pattern``; no interpolation."""
    image = _check_rgb(image)
    h, w, _ = image.shape
    grid = pattern.index_grid(h, w)
    plane = np.take_along_axis(image, grid[..., None], axis=2)[..., 0]
    return MosaicImage(plane.copy(), pattern)


def add_noise(m: MosaicImage, noise: NoiseSpec) -> MosaicImage:
    """Add i.i.d. Gaussian noise with std ``sigma/255`` and clip to [0, 1]."""
    if noise.sigma == 0:
        return MosaicImage(m.plane.copy(), m.pattern)
    rng = np.random.default_rng(noise.seed)
    g = rng.normal(0.0, noise.sigma / 255.0, size=m.plane.shape)
    out = np.clip(m.plane + g, 0.0, 1.0).astype(m.plane.dtype, copy=False)
    return MosaicImage(out, m.pattern)


def pack_input(m: MosaicImage) -> np.ndarray:
    """Zero-filled sparse ``3 x H x W`` encoding of a mosaic.

    Each sample sits in its own colour channel; the channel sum gives back
    the plane exactly.
    """
    grid = m.pattern.index_grid(*m.plane.shape)
    packed = np.zeros((3,) + m.plane.shape, dtype=m.plane.dtype)
    for c in range(3):
        sel = grid == c
        packed[c][sel] = m.plane[sel]
    return packed


def degrade(image: np.ndarray, pattern: CfaPattern, noise: NoiseSpec) -> MosaicImage:
    return add_noise(mosaic(image, pattern), noise)


# -- classical reference pipeline ------------------------------------------

def _tent(radius: int) -> np.ndarray:
    k = radius - np.abs(np.arange(-radius + 1, radius))
    return np.outer(k, k).astype(np.float64)


def _normalized_conv(values: np.ndarray, weights: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    num = ndimage.convolve(values * weights, kernel, mode="constant")
    den = ndimage.convolve(weights, kernel, mode="constant")
    return num / np.maximum(den, 1e-12)


def denoise_mosaic(m: MosaicImage, sigma_px: float = 1.0) -> MosaicImage:
    """Smooth each colour's samples with a same-colour normalized Gaussian."""
    if sigma_px <= 0:
        return MosaicImage(m.plane.copy(), m.pattern)
    radius = int(np.ceil(3 * sigma_px))
    ax = np.arange(-radius, radius + 1)
    g1 = np.exp(-0.5 * (ax / sigma_px) ** 2)
    kernel = np.outer(g1, g1)
    mask = cfa_mask(m.pattern, *m.plane.shape)
    out = np.zeros_like(m.plane, dtype=np.float64)
    for c in range(3):
        smoothed = _normalized_conv(m.plane, mask[..., c], kernel)
        out += smoothed * mask[..., c]
    return MosaicImage(np.clip(out, 0.0, 1.0), m.pattern)


def bilinear_demosaic(m: MosaicImage) -> np.ndarray:
    """Normalized-convolution bilinear interpolation for any supported CFA.

    The tent radius equals the pattern period so that every pixel sees at
    least one sample of each colour (a 3x3 tent for Bayer, 7x7 for Quad).
    """
    kernel = _tent(m.pattern.period)
    mask = cfa_mask(m.pattern, *m.plane.shape)
    out = np.empty(m.plane.shape + (3,), dtype=np.float64)
    for c in range(3):
        interp = _normalized_conv(m.plane, mask[..., c], kernel)
        out[..., c] = np.where(mask[..., c] > 0, m.plane, interp)
    return np.clip(out, 0.0, 1.0)
