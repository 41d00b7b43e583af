"""PSNR, SSIM and mean CIEDE2000 for ``H x W x 3`` images in [0, 1]."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .color import delta_e_map

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(reference, output) -> float:
    """``10 log10(1 / MSE)``; ``inf`` when the images are identical."""
    a, b = _pair(reference, output)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return -10.0 * math.log10(mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # separable Gaussian, keeping only windows that lie fully inside the image
    r = len(g) // 2
    y = ndimage.correlate1d(x, g, axis=0, mode="constant")
    y = ndimage.correlate1d(y, g, axis=1, mode="constant")
    return y[r:-r, r:-r]


def ssim_map(reference: np.ndarray, output: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Single-channel SSIM map over valid window positions."""
    a, b = _pair(reference, output)
    if a.ndim != 2:
        raise ValueError("ssim_map expects a single channel")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(reference, output) -> float:
    """Mean SSIM, computed per channel and averaged."""
    a, b = _pair(reference, output)
    if a.ndim == 2:
        return float(ssim_map(a, b).mean())
    return float(np.mean([ssim_map(a[..., c], b[..., c]).mean() for c in range(a.shape[-1])]))


def delta_e(reference, output) -> float:
    a, b = _pair(reference, output)
    return delta_e_map(a, b)[1]


def quantize8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def array_checksum(image: np.ndarray) -> str:
    """sha256 of the image quantised to 16 bits (stable across float dtypes)."""
    q = np.round(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 65535).astype("<u2")
    h = hashlib.sha256()
    h.update(str(q.shape).encode())
    h.update(q.tobytes())
    return h.hexdigest()


@dataclass
class ImageMetrics:
    name: str
    psnr: float
    ssim: float
    delta_e: float

    def to_record(self, **extra) -> dict:
        return {"kind": "image", "name": self.name, "psnr": _jsonable(self.psnr),
                "ssim": self.ssim, "delta_e": self.delta_e, **extra}


@dataclass
class MetricReport:
    images: list[ImageMetrics]
    psnr: float
    ssim: float
    delta_e: float
    warnings: list[str] = field(default_factory=list)

    def summary_record(self, **extra) -> dict:
        return {"kind": "summary", "count": len(self.images), "psnr": _jsonable(self.psnr),
                "ssim": self.ssim, "delta_e": self.delta_e, "warnings": list(self.warnings), **extra}

    def write_jsonl(self, path: str | Path, **extra) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for m in self.images:
                f.write(json.dumps(m.to_record(**extra)) + "\n")
            f.write(json.dumps(self.summary_record(**extra)) + "\n")


def _jsonable(x: float):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def _mean(values: list[float]) -> float:
    if any(math.isinf(v) for v in values):
        return sum(values) / len(values)
    return math.fsum(values) / len(values)


def evaluate_dataset(
    outputs: Sequence[np.ndarray],
    references: Sequence[np.ndarray],
    names: Sequence[str] | None = None,
    reference_checksums: Sequence[str] | None = None,
    quantize: bool = False,
) -> MetricReport:
    """Score paired images and average.

    When ``reference_checksums`` is given each reference is hashed and
    compared; a mismatch means the pairing was shuffled and is reported as
    a warning rather than an error.
    """
    if len(outputs) != len(references):
        raise ValueError(f"{len(outputs)} outputs but {len(references)} references")
    if not outputs:
        raise ValueError("empty dataset")
    names = list(names) if names is not None else [str(i) for i in range(len(outputs))]
    warnings = []
    if reference_checksums is not None:
        for name, ref, expect in zip(names, references, reference_checksums):
            if array_checksum(ref) != expect:
                warnings.append(f"checksum mismatch for {name}: pairing may be shuffled")
        for w in warnings:
            log.warning(w)
    per = []
    for name, out, ref in zip(names, outputs, references):
        if quantize:
            out, ref = quantize8(out), quantize8(ref)
        per.append(ImageMetrics(name, psnr(ref, out), ssim(ref, out), delta_e(ref, out)))
    return MetricReport(
        images=per,
        psnr=_mean([m.psnr for m in per]),
        ssim=_mean([m.ssim for m in per]),
        delta_e=_mean([m.delta_e for m in per]),
        warnings=warnings,
    )
