"""PNG input/output for RGB images and tagged CFA mosaics.

Mosaics are single-channel 16-bit PNGs with a ``<name>.cfa`` sidecar that
holds the pattern name (``bayer`` or ``quad``).
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .cfa import CfaPattern, MosaicImage

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}


def _scale(arr: np.ndarray) -> float:
    if arr.dtype == np.uint8:
        return 255.0
    if arr.dtype == np.uint16:
        return 65535.0
    raise ValueError(f"unsupported image dtype {arr.dtype}")


def read_image(path: str | Path) -> np.ndarray:
    """Read an 8/16-bit image as ``H x W x 3`` float64 RGB in [0, 1]."""
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"cannot read image {path}")
    scale = _scale(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    elif arr.shape[2] == 4:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGRA2RGB)
    else:
        arr = cv2.cvtColor(arr, cv2.COLOR_BGR2RGB)
    return arr.astype(np.float64) / scale


def write_image(path: str | Path, image: np.ndarray, bits: int = 16) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected H x W x 3, got {image.shape}")
    dtype, scale = (np.uint16, 65535.0) if bits == 16 else (np.uint8, 255.0)
    q = np.round(np.clip(image, 0.0, 1.0) * scale).astype(dtype)
    _imwrite(path, cv2.cvtColor(q, cv2.COLOR_RGB2BGR))


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".cfa")


def write_mosaic(path: str | Path, m: MosaicImage) -> None:
    q = np.round(np.clip(m.plane, 0.0, 1.0) * 65535.0).astype(np.uint16)
    _imwrite(path, q)
    sidecar_path(path).write_text(m.pattern.value + "\n")


def read_mosaic(path: str | Path, pattern: CfaPattern | str | None = None) -> MosaicImage:
    arr = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if arr is None:
        raise OSError(f"cannot read mosaic {path}")
    if arr.ndim != 2:
        raise ValueError(f"mosaic {path} must be single-channel")
    side = sidecar_path(path)
    if pattern is None:
        if not side.is_file():
            raise OSError(f"missing CFA sidecar {side}")
        pattern = side.read_text().strip()
    return MosaicImage(arr.astype(np.float64) / _scale(arr), CfaPattern.parse(pattern))


def _imwrite(path: str | Path, arr: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), arr):
        raise OSError(f"cannot write {path}")


def list_images(directory: str | Path) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
