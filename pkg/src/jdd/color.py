"""sRGB -> CIELAB conversion and the CIEDE2000 colour difference.

Two paths share the same constants:

* numpy functions (``srgb_to_lab``, ``ciede2000``, ``delta_e_map``) are the
  exact reference used for evaluation;
* torch functions (``srgb_to_lab_torch``, ``ciede2000_torch``) are
  differentiable everywhere and back the perceptual colour loss.

The illuminant is D65 with the CIE 1931 2 degree observer. The sRGB -> XYZ
matrix is derived from the sRGB primaries and the D65 chromaticity so that
(1, 1, 1) maps exactly onto the reference white.
"""

from __future__ import annotations

import numpy as np
import torch

_PRIMARIES_XY = np.array([[0.64, 0.33], [0.30, 0.60], [0.15, 0.06]])
D65_XY = np.array([0.3127, 0.3290])

_LAB_EPSILON = 216.0 / 24389.0
_LAB_KAPPA = 24389.0 / 27.0

def _xy_to_xyz(xy: np.ndarray) -> np.ndarray:
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([x / y, np.ones_like(x), (1 - x - y) / y], axis=-1)


def _rgb_to_xyz_matrix() -> np.ndarray:
    prim = _xy_to_xyz(_PRIMARIES_XY).T
    white = _xy_to_xyz(D65_XY)
    scale = np.linalg.solve(prim, white)
    return prim * scale


SRGB_TO_XYZ = _rgb_to_xyz_matrix()
D65_WHITE = _xy_to_xyz(D65_XY)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def _lab_f(t: np.ndarray) -> np.ndarray:
    return np.where(t > _LAB_EPSILON, np.cbrt(t), (_LAB_KAPPA * t + 16.0) / 116.0)


def srgb_to_lab(image: np.ndarray) -> np.ndarray:
    """Convert ``... x 3`` sRGB values in [0, 1] to CIELAB (L in [0, 100])."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[-1:] != (3,):
        raise ValueError(f"expected trailing channel axis of size 3, got {image.shape}")
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("sRGB values must lie in [0, 1]")
    xyz = srgb_to_linear(image) @ SRGB_TO_XYZ.T
    f = _lab_f(xyz / D65_WHITE)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def ciede2000(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 difference between Lab triples (broadcast over leading axes).

    Follows the standard formulation including the zero-chroma conventions
    for the hue difference and mean hue.
    """
    lab1 = np.asarray(lab1, dtype=np.float64)
    lab2 = np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]

    C1 = np.hypot(a1, b1)
    C2 = np.hypot(a2, b2)
    c7 = ((C1 + C2) / 2.0) ** 7
    G = 0.5 * (1.0 - np.sqrt(c7 / (c7 + 25.0**7)))
    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = np.hypot(a1p, b1)
    C2p = np.hypot(a2p, b2)
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, np.degrees(np.arctan2(b1, a1p)) % 360.0)
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, np.degrees(np.arctan2(b2, a2p)) % 360.0)

    dLp = L2 - L1
    dCp = C2p - C1p
    prod = C1p * C2p
    dh = h2p - h1p
    dhp = np.where(dh > 180.0, dh - 360.0, np.where(dh < -180.0, dh + 360.0, dh))
    dhp = np.where(prod == 0, 0.0, dhp)
    dHp = 2.0 * np.sqrt(prod) * np.sin(np.radians(dhp) / 2.0)

    Lbar = (L1 + L2) / 2.0
    Cbar = (C1p + C2p) / 2.0
    hsum = h1p + h2p
    hbar = np.where(
        np.abs(h1p - h2p) <= 180.0,
        hsum / 2.0,
        np.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    hbar = np.where(prod == 0, hsum, hbar)

    T = (
        1.0
        - 0.17 * np.cos(np.radians(hbar - 30.0))
        + 0.24 * np.cos(np.radians(2.0 * hbar))
        + 0.32 * np.cos(np.radians(3.0 * hbar + 6.0))
        - 0.20 * np.cos(np.radians(4.0 * hbar - 63.0))
    )
    dtheta = 30.0 * np.exp(-(((hbar - 275.0) / 25.0) ** 2))
    cb7 = Cbar**7
    Rc = 2.0 * np.sqrt(cb7 / (cb7 + 25.0**7))
    Sl = 1.0 + 0.015 * (Lbar - 50.0) ** 2 / np.sqrt(20.0 + (Lbar - 50.0) ** 2)
    Sc = 1.0 + 0.045 * Cbar
    Sh = 1.0 + 0.015 * Cbar * T
    Rt = -np.sin(np.radians(2.0 * dtheta)) * Rc

    tl = dLp / (kL * Sl)
    tc = dCp / (kC * Sc)
    th = dHp / (kH * Sh)
    return np.sqrt(tl**2 + tc**2 + th**2 + Rt * tc * th)


def delta_e_map(img1: np.ndarray, img2: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-pixel CIEDE2000 between two ``H x W x 3`` sRGB images, and its mean."""
    img1 = np.asarray(img1)
    img2 = np.asarray(img2)
    if img1.shape != img2.shape:
        raise ValueError(f"image shapes differ: {img1.shape} vs {img2.shape}")
    de = ciede2000(srgb_to_lab(img1), srgb_to_lab(img2))
    return de, float(de.mean())


# -- differentiable path -----------------------------------------------------

def _safe_sqrt(x: torch.Tensor) -> torch.Tensor:
    # exact value, zero gradient (instead of inf/nan) where x <= 0
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def srgb_to_lab_torch(image: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Differentiable sRGB -> Lab along channel axis ``dim``."""
    x = image.movedim(dim, -1)
    lin = torch.where(
        x <= 0.04045,
        x / 12.92,
        ((x.clamp_min(0.04045) + 0.055) / 1.055) ** 2.4,
    )
    m = torch.as_tensor(SRGB_TO_XYZ, dtype=x.dtype, device=x.device)
    white = torch.as_tensor(D65_WHITE, dtype=x.dtype, device=x.device)
    t = (lin @ m.T) / white
    t_hi = torch.where(t > _LAB_EPSILON, t, torch.full_like(t, _LAB_EPSILON))
    f = torch.where(t > _LAB_EPSILON, t_hi ** (1.0 / 3.0), (_LAB_KAPPA * t + 16.0) / 116.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return torch.stack([L, a, b], dim=-1).movedim(-1, dim)


def _hue_deg(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    zero = (a == 0) & (b == 0)
    a_s = torch.where(zero, torch.ones_like(a), a)
    b_s = torch.where(zero, torch.zeros_like(b), b)
    return torch.remainder(torch.rad2deg(torch.atan2(b_s, a_s)), 360.0)


def ciede2000_torch(lab1: torch.Tensor, lab2: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Differentiable CIEDE2000 (kL = kC = kH = 1); reduces channel axis ``dim``."""
    L1, a1, b1 = lab1.unbind(dim)
    L2, a2, b2 = lab2.unbind(dim)

    C1 = _safe_sqrt(a1**2 + b1**2)
    C2 = _safe_sqrt(a2**2 + b2**2)
    c7 = ((C1 + C2) / 2.0) ** 7
    G = 0.5 * (1.0 - _safe_sqrt(c7 / (c7 + 25.0**7)))
    a1p = (1.0 + G) * a1
    a2p = (1.0 + G) * a2
    C1p = _safe_sqrt(a1p**2 + b1**2)
    C2p = _safe_sqrt(a2p**2 + b2**2)
    h1p = _hue_deg(a1p, b1)
    h2p = _hue_deg(a2p, b2)

    dLp = L2 - L1
    dCp = C2p - C1p
    prod = C1p * C2p
    zero = prod == 0
    dh = h2p - h1p
    dhp = torch.where(dh > 180.0, dh - 360.0, torch.where(dh < -180.0, dh + 360.0, dh))
    dhp = torch.where(zero, torch.zeros_like(dhp), dhp)
    dHp = 2.0 * _safe_sqrt(prod) * torch.sin(torch.deg2rad(dhp) / 2.0)

    Lbar = (L1 + L2) / 2.0
    Cbar = (C1p + C2p) / 2.0
    hsum = h1p + h2p
    hbar = torch.where(
        (h1p - h2p).abs() <= 180.0,
        hsum / 2.0,
        torch.where(hsum < 360.0, (hsum + 360.0) / 2.0, (hsum - 360.0) / 2.0),
    )
    hbar = torch.where(zero, hsum, hbar)

    T = (
        1.0
        - 0.17 * torch.cos(torch.deg2rad(hbar - 30.0))
        + 0.24 * torch.cos(torch.deg2rad(2.0 * hbar))
        + 0.32 * torch.cos(torch.deg2rad(3.0 * hbar + 6.0))
        - 0.20 * torch.cos(torch.deg2rad(4.0 * hbar - 63.0))
    )
    dtheta = 30.0 * torch.exp(-(((hbar - 275.0) / 25.0) ** 2))
    cb7 = Cbar**7
    Rc = 2.0 * _safe_sqrt(cb7 / (cb7 + 25.0**7))
    Sl = 1.0 + 0.015 * (Lbar - 50.0) ** 2 / torch.sqrt(20.0 + (Lbar - 50.0) ** 2)
    Sc = 1.0 + 0.045 * Cbar
    Sh = 1.0 + 0.015 * Cbar * T
    Rt = -torch.sin(torch.deg2rad(2.0 * dtheta)) * Rc

    tl = dLp / Sl
    tc = dCp / Sc
    th = dHp / Sh
    return _safe_sqrt(tl**2 + tc**2 + th**2 + Rt * tc * th)
