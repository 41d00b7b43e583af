"""Multi-term training objective.

``L_T = L_R + L_RFL + L_PCL + lambda_G * L_G`` where

* ``L_R``   is the L1 reconstruction error,
* ``L_RFL`` is the feature loss scaled by an adaptive total-variation weight,
* ``L_PCL`` is the mean per-pixel CIEDE2000 between output and reference,
* ``L_G``   is the generator's adversarial cross-entropy.

All image tensors are ``B x 3 x H x W`` in [0, 1].
"""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .color import ciede2000_torch, srgb_to_lab_torch

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

# torchvision vgg19().features indices
VGG19_LAYERS = {
    "relu1_1": 1, "relu1_2": 3, "pool1": 4,
    "relu2_1": 6, "relu2_2": 8, "pool2": 9,
    "relu3_1": 11, "relu3_2": 13, "relu3_3": 15, "relu3_4": 17, "pool3": 18,
    "relu4_1": 20, "relu4_2": 22, "relu4_3": 24, "relu4_4": 26, "pool4": 27,
    "relu5_1": 29, "relu5_2": 31, "relu5_3": 33, "relu5_4": 35, "pool5": 36,
}

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class LossWeights:
    lambda_G: float = 1e-4

    def __post_init__(self):
        if self.lambda_G < 0:
            raise ValueError("lambda_G must be >= 0")


class ExtractorLoadError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Which VGG-19 layer to compare and where its weights live.

    ``weights_path=None`` builds a seeded randomly initialised network; that
    is only meant for offline desk runs and is logged as a warning.
    Relative paths are resolved against ``$JDD_CACHE`` when it is set.
    """

    layer_id: str = "pool3"
    weights_path: str | None = None
    init_seed: int = 0

    def resolve_weights(self) -> Path | None:
        if self.weights_path is None:
            return None
        p = Path(self.weights_path).expanduser()
        cache = os.environ.get("JDD_CACHE")
        if not p.is_absolute() and cache and not p.exists():
            p = Path(cache) / p
        return p


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class FeatureExtractor(nn.Module):
    """Frozen feature network; ``forward`` maps images to layer-j activations."""

    def __init__(self, body: nn.Module, normalize: bool = True):
        super().__init__()
        self.body = body
        self.normalize = normalize
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.weights_sha256: str | None = None
        self.freeze()

    def freeze(self) -> "FeatureExtractor":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # never leaves eval mode
        return super().train(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalize:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        return self.body(x)

    @classmethod
    def vgg19(cls, spec: FeatureExtractorSpec | None = None) -> "FeatureExtractor":

        spec = spec or FeatureExtractorSpec()
        if spec.layer_id not in VGG19_LAYERS:
            raise ValueError(f"unknown VGG-19 layer {spec.layer_id!r}")
        last = VGG19_LAYERS[spec.layer_id]
        path = spec.resolve_weights()
        if path is None:
            log.warning("feature extractor uses random weights (seed %d)", spec.init_seed)
            with torch.random.fork_rng(devices=[]):
                torch.manual_seed(spec.init_seed)
                features = _vgg19_features(init=True)
        else:
            if not path.is_file():
                raise ExtractorLoadError(f"feature extractor weights not found: {path}")
            features = _vgg19_features(init=False)
            state = torch.load(path, map_location="cpu", weights_only=True)
            prefix = "features."
            if any(k.startswith(prefix) for k in state):
                state = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            features.load_state_dict(state)
        body = nn.Sequential(*list(features.children())[: last + 1])
        ext = cls(body)
        if path is not None:
            ext.weights_sha256 = file_sha256(path)
            log.info("feature extractor weights %s sha256=%s", path, ext.weights_sha256)
        return ext


def _vgg19_features(init: bool) -> nn.Sequential:
    # convolutional trunk only; the classifier is never used
    from torchvision.models.vgg import cfgs, make_layers

    features = make_layers(cfgs["E"], batch_norm=False)
    if init:
        for m in features.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
    return features


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def reconstruction_loss(target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    _check_pair(target, output)
    return (target - output).abs().mean()


def feature_loss(target: torch.Tensor, output: torch.Tensor, extractor: nn.Module) -> torch.Tensor:
    """Per-sample mean absolute difference of extractor activations, shape ``(B,)``."""
    _check_pair(target, output)
    diff = (extractor(target) - extractor(output)).abs()
    return diff.flatten(1).mean(dim=1)


def tv_regulator(image: torch.Tensor, feature_shape: tuple[int, int, int]) -> torch.Tensor:
    """Adaptive feature-loss weight, per sample; carries no gradient.

    Sum of absolute vertical and horizontal forward differences divided by
    the element count ``C_j * H_j * W_j`` of the compared feature layer.
    """
    c, h, w = feature_shape
    with torch.no_grad():
        dv = (image[..., 1:, :] - image[..., :-1, :]).abs().flatten(1).sum(dim=1)
        dh = (image[..., :, 1:] - image[..., :, :-1]).abs().flatten(1).sum(dim=1)
        return (dv + dh) / float(c * h * w)


def regularized_feature_loss(
    target: torch.Tensor,
    output: torch.Tensor,
    extractor: nn.Module,
    tv_operand: str = "output",
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(L_RFL, lambda_R)`` averaged over the batch."""
    _check_pair(target, output)
    f_t = extractor(target)
    f_o = extractor(output)
    l_vgg = (f_t - f_o).abs().flatten(1).mean(dim=1)
    if tv_operand == "output":
        src = output
    elif tv_operand == "reference":
        src = target
    else:
        raise ValueError(f"tv_operand must be 'output' or 'reference', got {tv_operand!r}")
    lam = tv_regulator(src, tuple(f_o.shape[1:]))
    return (lam * l_vgg).mean(), lam.mean()


def perceptual_colour_loss(target: torch.Tensor, output: torch.Tensor) -> torch.Tensor:
    _check_pair(target, output)
    de = ciede2000_torch(srgb_to_lab_torch(target), srgb_to_lab_torch(output))
    return de.mean()


def generator_adversarial_loss(d_fake: torch.Tensor) -> torch.Tensor:
    return -torch.log(d_fake.clamp(PROB_EPS, 1.0)).mean()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    real = torch.log(d_real.clamp(PROB_EPS, 1.0))
    fake = torch.log((1.0 - d_fake).clamp(PROB_EPS, 1.0))
    return -(real + fake).mean()


@dataclass
class LossReport:
    """Loss terms of one step as 0-d tensors; ``L_T`` keeps the graph."""

    L_R: torch.Tensor
    L_RFL: torch.Tensor
    L_PCL: torch.Tensor
    L_G: torch.Tensor
    lambda_R: torch.Tensor
    L_T: torch.Tensor
    lambda_G: float = 1e-4

    def as_dict(self) -> dict[str, float]:
        return {
            "L_R": float(self.L_R.detach()),
            "L_RFL": float(self.L_RFL.detach()),
            "L_PCL": float(self.L_PCL.detach()),
            "L_G": float(self.L_G.detach()),
            "lambda_R": float(self.lambda_R.detach()),
            "L_T": float(self.L_T.detach()),
        }

    def decomposition_error(self) -> float:
        d = self.as_dict()
        return abs(d["L_T"] - (d["L_R"] + d["L_RFL"] + d["L_PCL"] + self.lambda_G * d["L_G"]))


def total_loss(
    target: torch.Tensor,
    output: torch.Tensor,
    d_out: torch.Tensor | None,
    extractor: nn.Module | None,
    weights: LossWeights = LossWeights(),
    *,
    use_rfl: bool = True,
    use_pcl: bool = True,
    use_gan: bool = True,
    tv_operand: str = "output",
) -> LossReport:
    """Assemble the objective; disabled terms contribute (and report) zero."""
    zero = output.new_zeros(())
    l_r = reconstruction_loss(target, output)
    if use_rfl:
        if extractor is None:
            raise ValueError("regularized feature loss needs an extractor")
        l_rfl, lam = regularized_feature_loss(target, output, extractor, tv_operand)
    else:
        l_rfl, lam = zero, zero
    l_pcl = perceptual_colour_loss(target, output) if use_pcl else zero
    if use_gan and d_out is not None:
        l_g = generator_adversarial_loss(d_out)
    else:
        l_g = zero
    l_t = l_r + l_rfl + l_pcl + weights.lambda_G * l_g
    return LossReport(l_r, l_rfl, l_pcl, l_g, lam, l_t, weights.lambda_G)
