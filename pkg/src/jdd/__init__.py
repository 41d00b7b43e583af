"""Joint demosaicking and denoising for Bayer and Quad Bayer sensors."""

from .cfa import CfaPattern, MosaicImage, NoiseSpec, add_noise, degrade, mosaic, pack_input
from .color import ciede2000, delta_e_map, srgb_to_lab
from .metrics import MetricReport, evaluate_dataset, psnr, ssim
from .network import Discriminator, Generator, NetworkConfig

__version__ = "0.1.0"

__all__ = [
    "CfaPattern", "MosaicImage", "NoiseSpec", "add_noise", "degrade", "mosaic", "pack_input",
    "ciede2000", "delta_e_map", "srgb_to_lab",
    "MetricReport", "evaluate_dataset", "psnr", "ssim",
    "Discriminator", "Generator", "NetworkConfig",
]
