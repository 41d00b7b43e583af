"""PIPNet generator and conditional discriminator.

The generator is a three-scale U-Net built from group depth-attention
bottleneck blocks (GDAB). Each GDAB holds ``m`` depth-attention bottleneck
blocks (DAB) and a learned 1x1 skip transform. Spatial attention gates the
encoder output at every scale and each decoder skip connection.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F


SQUEEZE_BIAS_INIT = 0.1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    depths: tuple[int, ...] = (64, 128, 256)
    group_density: int = 3
    reduction: int = 16
    bottleneck_expansion: int = 2
    leaky_slope: float = 0.2
    disc_layers: int = 6
    disc_base_width: int = 64

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(int(d) for d in self.depths))
        if len(self.depths) < 2:
            raise ConfigError("need at least two feature depths")
        if any(b <= a for a, b in zip(self.depths, self.depths[1:])):
            raise ConfigError(f"depths must be strictly increasing: {self.depths}")
        if self.reduction < 1 or any(d % self.reduction for d in self.depths):
            raise ConfigError(f"every depth must be divisible by reduction={self.reduction}")
        if self.group_density < 1:
            raise ConfigError("group_density must be >= 1")
        if self.bottleneck_expansion < 1:
            raise ConfigError("bottleneck_expansion must be >= 1")
        if self.disc_layers < 1 or self.disc_base_width < 1:
            raise ConfigError("discriminator needs at least one layer of positive width")

    @property
    def size_multiple(self) -> int:
        return 2 ** (len(self.depths) - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["depths"] = list(self.depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


class DepthAttention(nn.Module):
    """Squeeze-and-excitation style channel gate."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"{channels} channels not divisible by reduction {reduction}")
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.excite = nn.Conv2d(channels // reduction, channels, 1)
        # pooled means start near zero, so a negative random bias can leave every
        # squeeze unit dead; a small positive bias keeps them active at init
        nn.init.constant_(self.squeeze.bias, SQUEEZE_BIAS_INIT)

    def gate(self, x: torch.Tensor) -> torch.Tensor:
        z = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(z))))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gate(x)


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        avg = x.mean(dim=1, keepdim=True)
        mx = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([avg, mx], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_map(x)


class Bottleneck(nn.Module):
    """1x1 expand, 3x3 depthwise, 1x1 project; LeakyReLU after the first two."""

    def __init__(self, channels: int, expansion: int = 2, slope: float = 0.2):
        super().__init__()
        hidden = channels * expansion
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.project = nn.Conv2d(hidden, channels, 1)
        self.slope = slope

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.leaky_relu(self.expand(x), self.slope)
        h = F.leaky_relu(self.depthwise(h), self.slope)
        return self.project(h)


class DAB(nn.Module):
    def __init__(self, channels: int, cfg: NetworkConfig, attention: bool = True):
        super().__init__()
        self.bottleneck = Bottleneck(channels, cfg.bottleneck_expansion, cfg.leaky_slope)
        self.depth_attention = DepthAttention(channels, cfg.reduction) if attention else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.bottleneck(x)
        if self.depth_attention is not None:
            out = out + self.depth_attention(x)
        return out


class GDAB(nn.Module):
    def __init__(self, channels: int, cfg: NetworkConfig, attention: bool = True):
        super().__init__()
        self.skip = nn.Conv2d(channels, channels, 1, bias=False)
        self.blocks = nn.Sequential(
            *[DAB(channels, cfg, attention) for _ in range(cfg.group_density)]
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.skip(x) + self.blocks(x)


class Downsample(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ValueError(f"downsample needs even spatial dims, got {h}x{w}")
        return self.conv(x)


class Upsample(nn.Module):
    """3x3 conv to 4*c_out channels, pixel shuffle by 2, PReLU."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.conv = nn.Conv2d(c_in, 4 * c_out, 3, padding=1)
        self.act = nn.PReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.act(F.pixel_shuffle(self.conv(x), 2))


class Generator(nn.Module):
    def __init__(self, cfg: NetworkConfig | None = None, attention: bool = True):
        super().__init__()
        self.cfg = cfg = cfg or NetworkConfig()
        self.attention = attention
        d = cfg.depths
        self.stem = nn.Conv2d(3, d[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(GDAB(c, cfg, attention) for c in d[:-1])
        self.down = nn.ModuleList(Downsample(a, b) for a, b in zip(d[:-1], d[1:]))
        self.bottom = GDAB(d[-1], cfg, attention)
        # decoder modules are indexed by scale (0 = full resolution)
        self.up = nn.ModuleList(Upsample(b, a) for a, b in zip(d[:-1], d[1:]))
        self.fuse = nn.ModuleList(nn.Conv2d(2 * c, c, 1) for c in d[:-1])
        self.dec_blocks = nn.ModuleList(GDAB(c, cfg, attention) for c in d[:-1])
        if attention:
            self.enc_sa = nn.ModuleList(SpatialAttention() for _ in d[:-1])
            self.skip_sa = nn.ModuleList(SpatialAttention() for _ in d[:-1])
        else:
            self.enc_sa = self.skip_sa = None
        self.head = nn.Conv2d(d[0], 3, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        k = self.cfg.size_multiple
        if h % k or w % k:
            raise ValueError(f"generator input {h}x{w} must be a multiple of {k}")
        f = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            f = block(f)
            if self.enc_sa is not None:
                f = self.enc_sa[i](f)
            skips.append(f)
            f = self.down[i](f)
        f = self.bottom(f)
        for i in reversed(range(len(self.dec_blocks))):
            f = self.up[i](f)
            s = skips[i] if self.skip_sa is None else self.skip_sa[i](skips[i])
            f = self.fuse[i](torch.cat([f, s], dim=1))
            f = self.dec_blocks[i](f)
        return torch.sigmoid(self.head(f))


class Discriminator(nn.Module):
    """Pair critic: odd-numbered layers (1st, 3rd, ...) double width and stride 2."""

    def __init__(self, cfg: NetworkConfig | None = None, in_channels: int = 6):
        super().__init__()
        cfg = cfg or NetworkConfig()
        layers = []
        c_in, width = in_channels, cfg.disc_base_width
        for i in range(cfg.disc_layers):
            if i % 2 == 0:
                c_out = width if i == 0 else c_in * 2
                stride = 2
            else:
                c_out, stride = c_in, 1
            layers.append(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1))
            c_in = c_out
        self.convs = nn.ModuleList(layers)
        self.fc = nn.Linear(c_in, 1)

    def features(self, reference: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        if reference.shape[-2:] != candidate.shape[-2:] or reference.shape[0] != candidate.shape[0]:
            raise ValueError(
                f"discriminator pair mismatch: {tuple(reference.shape)} vs {tuple(candidate.shape)}"
            )
        x = torch.cat([reference, candidate], dim=1)
        for conv in self.convs:
            x = F.silu(conv(x))
        return x

    def forward(self, reference: torch.Tensor, candidate: torch.Tensor) -> torch.Tensor:
        x = self.features(reference, candidate).mean(dim=(2, 3))
        return torch.sigmoid(self.fc(x)).squeeze(1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoint archive --------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def validate_state(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter key mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    bad = [k for k in expected if tuple(expected[k].shape) != tuple(state[k].shape)]
    if bad:
        k = bad[0]
        raise CheckpointError(
            f"shape mismatch for {k}: checkpoint {tuple(state[k].shape)} vs model {tuple(expected[k].shape)}"
        )


def save_generator(path: str | Path, model: Generator) -> None:
    """Write parameters plus the JSON network config into one archive."""
    payload = {
        "network_config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "attention": model.attention,
        "generator": model.state_dict(),
    }
    _atomic_save(payload, Path(path))


def load_generator(path: str | Path) -> Generator:
    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    cfg = NetworkConfig.from_dict(json.loads(payload["network_config"]))
    model = Generator(cfg, attention=bool(payload.get("attention", True)))
    validate_state(model, payload["generator"])
    model.load_state_dict(payload["generator"])
    return model


def _atomic_save(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(obj, tmp)
    tmp.replace(path)
