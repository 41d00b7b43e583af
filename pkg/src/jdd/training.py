"""Alternating generator / discriminator optimisation, checkpoints and inference."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .cfa import CfaPattern, MosaicImage, NoiseSpec, bilinear_demosaic, degrade, denoise_mosaic, pack_input
from .data import DatasetManifest
from .files import read_mosaic, write_image
from .losses import (
    FeatureExtractor,
    FeatureExtractorSpec,
    LossWeights,
    discriminator_loss,
    total_loss,
)
from .metrics import MetricReport, array_checksum, evaluate_dataset
from .network import (
    CheckpointError,
    ConfigError,
    Discriminator,
    Generator,
    NetworkConfig,
    _atomic_save,
    count_parameters,
    validate_state,
)

log = logging.getLogger(__name__)

# fields that only control run length / bookkeeping, excluded from the config hash
_RUN_LENGTH_FIELDS = {"steps", "epochs", "checkpoint_every", "log_every"}


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    batch: int = 12
    steps: int | None = None
    epochs: int | None = None
    seed: int = 0
    use_attention: bool = True
    use_pcl: bool = True
    use_rfl: bool = True
    use_gan: bool = True
    lambda_G: float = 1e-4
    tv_operand: str = "output"
    conditioning: str = "reference"
    degradation: str = "online"
    hflip: bool = True
    extractor_layer: str = "pool3"
    extractor_weights: str | None = None
    extractor_seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 1
    deterministic: bool = True

    def __post_init__(self):
        for name in ("lr", "batch"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.lambda_G < 0:
            raise ConfigError("lambda_G must be >= 0")
        if self.tv_operand not in ("output", "reference"):
            raise ConfigError("tv_operand must be 'output' or 'reference'")
        if self.conditioning not in ("reference", "input"):
            raise ConfigError("conditioning must be 'reference' or 'input'")
        if self.degradation not in ("online", "stored"):
            raise ConfigError("degradation must be 'online' or 'stored'")
        if self.steps is not None and self.steps < 0:
            raise ConfigError("steps must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def extractor_spec(self) -> FeatureExtractorSpec:
        return FeatureExtractorSpec(self.extractor_layer, self.extractor_weights, self.extractor_seed)


def config_hash(net: NetworkConfig, train: TrainConfig) -> str:
    t = {k: v for k, v in train.to_dict().items() if k not in _RUN_LENGTH_FIELDS}
    blob = json.dumps({"network": net.to_dict(), "train": t}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class TrainingDiverged(RuntimeError):
    pass


def to_batch(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    """Stack ``H x W x 3`` arrays into a ``B x 3 x H x W`` tensor."""
    return torch.from_numpy(np.stack([np.moveaxis(i, -1, 0) for i in images])).to(dtype)


def from_batch(t: torch.Tensor) -> list[np.ndarray]:
    return [np.moveaxis(x, 0, -1).astype(np.float64) for x in t.detach().cpu().numpy()]


def set_deterministic(flag: bool = True) -> None:
    torch.use_deterministic_algorithms(flag)


def params_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Owns the networks, optimisers, data cache and RNG of one training run."""

    def __init__(
        self,
        manifest: DatasetManifest,
        net_cfg: NetworkConfig | None = None,
        cfg: TrainConfig | None = None,
        out_dir: str | Path | None = None,
        extractor: torch.nn.Module | None = None,
    ):
        self.manifest = manifest
        self.net_cfg = net_cfg or NetworkConfig()
        self.cfg = cfg or TrainConfig()
        self.out_dir = Path(out_dir) if out_dir else None
        if not manifest.records:
            raise ValueError("training manifest is empty")
        self.pattern = CfaPattern.parse(manifest.pattern)
        if manifest.patch_size % self.net_cfg.size_multiple:
            raise ConfigError(f"patch size {manifest.patch_size} not a multiple of {self.net_cfg.size_multiple}")
        if self.cfg.deterministic:
            set_deterministic(True)

        torch.manual_seed(self.cfg.seed)
        self.generator = Generator(self.net_cfg, attention=self.cfg.use_attention)
        self.discriminator = Discriminator(self.net_cfg)
        betas = (self.cfg.beta1, self.cfg.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=self.cfg.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), lr=self.cfg.lr, betas=betas)
        self.weights = LossWeights(self.cfg.lambda_G)
        if extractor is None and self.cfg.use_rfl:
            extractor = FeatureExtractor.vgg19(self.cfg.extractor_spec())
        self.extractor = extractor
        self.rng = np.random.default_rng(self.cfg.seed)
        self.step_count = 0
        self.config_hash = config_hash(self.net_cfg, self.cfg)
        self._cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    # -- data ------------------------------------------------------------------

    def _load(self, idx: int) -> tuple[np.ndarray, np.ndarray]:
        rec = self.manifest.records[idx]
        if rec.record_id not in self._cache:
            m, clean = self.manifest.load_pair(rec)
            self._cache[rec.record_id] = (m.plane, clean)
        return self._cache[rec.record_id]

    def sample_batch(self) -> tuple[torch.Tensor, torch.Tensor]:
        n = len(self.manifest.records)
        idx = self.rng.choice(n, size=self.cfg.batch, replace=n < self.cfg.batch)
        packed, clean = [], []
        for i in idx:
            plane, gt = self._load(int(i))
            if self.cfg.degradation == "online":
                if self.cfg.hflip and self.rng.random() < 0.5:
                    gt = gt[:, ::-1]
                sigma = self.manifest.records[int(i)].sigma
                m = degrade(gt, self.pattern, NoiseSpec(sigma, int(self.rng.integers(0, 2**31 - 1))))
            else:
                m = MosaicImage(plane, self.pattern)
            packed.append(np.moveaxis(pack_input(m), 0, -1))
            clean.append(gt)
        return to_batch(packed), to_batch(clean)

    # -- optimisation ----------------------------------------------------------

    def step(self) -> dict:
        x, target = self.sample_batch()
        g, d, cfg = self.generator, self.discriminator, self.cfg
        g.train()
        output = g(x)
        ref = target if cfg.conditioning == "reference" else x

        loss_d = None
        if cfg.use_gan:
            d.requires_grad_(True)
            self.opt_d.zero_grad(set_to_none=True)
            loss_d = discriminator_loss(d(ref, target), d(ref, output.detach()))
            loss_d.backward()
            self.opt_d.step()
            d.requires_grad_(False)
            d_out = d(ref, output)
        else:
            d_out = None

        report = total_loss(
            target, output, d_out, self.extractor, self.weights,
            use_rfl=cfg.use_rfl, use_pcl=cfg.use_pcl, use_gan=cfg.use_gan,
            tv_operand=cfg.tv_operand,
        )
        if not torch.isfinite(report.L_T):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step_count + 1}: {report.as_dict()}"
            )
        self.opt_g.zero_grad(set_to_none=True)
        report.L_T.backward()
        self.opt_g.step()
        self.step_count += 1
        rec = {"step": self.step_count, **report.as_dict()}
        if loss_d is not None:
            rec["L_D"] = float(loss_d.detach())
        return rec

    def total_steps(self) -> int:
        if self.cfg.steps is not None:
            return self.cfg.steps
        if self.cfg.epochs is not None:
            return self.cfg.epochs * math.ceil(len(self.manifest.records) / self.cfg.batch)
        raise ConfigError("set either steps or epochs")

    def run(self, steps: int | None = None, callback: Callable[[dict], None] | None = None) -> list[dict]:
        """Train until ``steps`` total steps (default from the config)."""
        target = self.total_steps() if steps is None else steps
        log_f = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_f = open(self.out_dir / "train_log.jsonl", "a")
            if self.step_count == 0:
                log_f.write(json.dumps(self._run_header()) + "\n")
        reports = []
        try:
            while self.step_count < target:
                rec = self.step()
                reports.append(rec)
                if callback:
                    callback(rec)
                if log_f and (self.step_count % max(self.cfg.log_every, 1) == 0):
                    log_f.write(json.dumps(rec) + "\n")
                every = self.cfg.checkpoint_every
                if self.out_dir is not None and every and self.step_count % every == 0:
                    self.save(self.out_dir / "checkpoint.pt")
        finally:
            if log_f:
                log_f.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint.pt")
        return reports

    def _run_header(self) -> dict:
        sha = getattr(self.extractor, "weights_sha256", None)
        return {
            "kind": "run",
            "config_hash": self.config_hash,
            "network": self.net_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "extractor_sha256": sha,
            "generator_params": count_parameters(self.generator),
        }

    # -- checkpoints -------------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "network_config": json.dumps(self.net_cfg.to_dict(), sort_keys=True),
            "train_config": json.dumps(self.cfg.to_dict(), sort_keys=True),
            "config_hash": self.config_hash,
            "attention": self.cfg.use_attention,
            "pattern": self.pattern.value,
            "step": self.step_count,
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng_numpy": json.dumps(self.rng.bit_generator.state),
            "rng_torch": torch.get_rng_state(),
        }

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        _atomic_save(self.state_dict(), path)
        return path

    def load_state_dict(self, state: dict) -> None:
        if state["config_hash"] != self.config_hash:
            raise CheckpointError(
                f"checkpoint config hash {state['config_hash']} != run config {self.config_hash}"
            )
        validate_state(self.generator, state["generator"])
        validate_state(self.discriminator, state["discriminator"])
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.rng.bit_generator.state = json.loads(state["rng_numpy"])
        torch.set_rng_state(state["rng_torch"])
        self.step_count = int(state["step"])

    def resume(self, path: str | Path) -> "Trainer":
        self.load_state_dict(torch.load(Path(path), map_location="cpu", weights_only=False))
        return self


def train(
    manifest: DatasetManifest,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
    extractor: torch.nn.Module | None = None,
) -> tuple[Trainer, list[dict]]:
    trainer = Trainer(manifest, net_cfg, cfg, out_dir, extractor)
    if resume_from is not None:
        trainer.resume(resume_from)
    return trainer, trainer.run()


# -- inference ----------------------------------------------------------------

def load_checkpoint(path: str | Path) -> tuple[Generator, CfaPattern | None]:
    """Generator and training pattern from a trainer or bare generator archive."""
    state = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = NetworkConfig.from_dict(json.loads(state["network_config"]))
    g = Generator(cfg, attention=bool(state.get("attention", True)))
    validate_state(g, state["generator"])
    g.load_state_dict(state["generator"])
    g.eval()
    pattern = CfaPattern.parse(state["pattern"]) if state.get("pattern") else None
    return g, pattern


def _positions(size: int, tile: int, stride: int) -> list[int]:
    pos = list(range(0, size - tile + 1, stride))
    if pos[-1] + tile < size:
        pos.append(size - tile)
    return pos


def _ramp(n: int, overlap: int) -> np.ndarray:
    i = np.arange(n)
    return np.minimum(np.minimum((i + 1) / (overlap + 1), (n - i) / (overlap + 1)), 1.0)


@torch.no_grad()
def _forward_packed(g: Generator, packed: np.ndarray) -> np.ndarray:
    """Run on a ``3 x H x W`` packed array, zero-padding to the size multiple."""
    k = g.cfg.size_multiple
    _, h, w = packed.shape
    ph, pw = (-h) % k, (-w) % k
    x = np.pad(packed, ((0, 0), (0, ph), (0, pw)))
    dtype = next(g.parameters()).dtype
    out = g(torch.from_numpy(x).unsqueeze(0).to(dtype))[0, :, :h, :w]
    return out.numpy().astype(np.float64)


def reconstruct(g: Generator, m: MosaicImage, tile: int | None = 128, overlap: int = 16) -> np.ndarray:
    """Demosaic + denoise one mosaic; tiles with blended overlap when larger than ``tile``."""
    g.eval()
    packed = pack_input(m)
    h, w = m.shape
    if tile is None or (h <= tile and w <= tile):
        return np.moveaxis(_forward_packed(g, packed), 0, -1)
    if tile % m.pattern.period or (tile - overlap) % m.pattern.period:
        raise ValueError("tile and stride must be multiples of the CFA period")
    th, tw = min(tile, h), min(tile, w)
    win = np.outer(_ramp(th, overlap), _ramp(tw, overlap))
    acc = np.zeros((3, h, w))
    wsum = np.zeros((h, w))
    for y in _positions(h, th, th - overlap):
        for x in _positions(w, tw, tw - overlap):
            out = _forward_packed(g, packed[:, y:y + th, x:x + tw])
            acc[:, y:y + th, x:x + tw] += out * win
            wsum[y:y + th, x:x + tw] += win
    return np.moveaxis(acc / wsum, 0, -1)


def infer(
    checkpoint: str | Path,
    mosaic_files: Iterable[str | Path],
    out_dir: str | Path,
    tile: int = 128,
    overlap: int = 16,
) -> list[Path]:
    g, trained_pattern = load_checkpoint(checkpoint)
    out_dir = Path(out_dir)
    written = []
    for f in mosaic_files:
        m = read_mosaic(f)
        if trained_pattern is not None and m.pattern is not trained_pattern:
            raise ValueError(
                f"{f}: mosaic pattern {m.pattern.value} does not match checkpoint pattern {trained_pattern.value}"
            )
        rgb = reconstruct(g, m, tile, overlap)
        dst = out_dir / Path(f).name
        write_image(dst, rgb, bits=16)
        written.append(dst)
    return written


def baseline_reconstruct(m: MosaicImage, denoise_sigma_px: float = 1.0) -> np.ndarray:
    """Classical reference: same-colour Gaussian denoise, then bilinear demosaic."""
    return bilinear_demosaic(denoise_mosaic(m, denoise_sigma_px))


def evaluate_model(g: Generator, manifest: DatasetManifest, tile: int | None = None) -> MetricReport:
    outputs, refs, names, sums = [], [], [], []
    for rec in manifest.records:
        m, clean = manifest.load_pair(rec)
        outputs.append(reconstruct(g, m, tile))
        refs.append(clean)
        names.append(rec.record_id)
        sums.append(array_checksum(clean))
    return evaluate_dataset(outputs, refs, names, sums)


# -- ablation -------------------------------------------------------------------

ABLATION_ROWS = {
    "Base": dict(use_attention=False, use_pcl=False, use_rfl=False),
    "Base + AM": dict(use_attention=True, use_pcl=False, use_rfl=False),
    "Base + AM + PCL": dict(use_attention=True, use_pcl=True, use_rfl=False),
    "Base + AM + PCL + RFL": dict(use_attention=True, use_pcl=True, use_rfl=True),
}


def ablation_matrix(
    train_manifest: DatasetManifest,
    eval_manifest: DatasetManifest,
    net_cfg: NetworkConfig,
    cfg: TrainConfig,
    densities: Sequence[int] = (1, 2, 3),
    rows: Sequence[str] = tuple(ABLATION_ROWS),
    out_dir: str | Path | None = None,
    extractor: torch.nn.Module | None = None,
) -> list[dict]:
    """Train and score every (row, group density) cell.

    A failing cell is kept in the table with its error message and NaN
    metrics instead of aborting the whole matrix.
    """
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigError(f"unknown ablation rows {unknown}; choose from {list(ABLATION_ROWS)}")
    table = []
    for row in rows:
        for m in densities:
            ncfg = dataclasses.replace(net_cfg, group_density=m)
            tcfg = dataclasses.replace(cfg, **ABLATION_ROWS[row])
            cell = {"model": row, "gd": m,
                    "params": count_parameters(Generator(ncfg, attention=tcfg.use_attention))}
            try:
                cell_dir = Path(out_dir) / f"{row.replace(' + ', '+').replace(' ', '_')}_gd{m}" if out_dir else None
                trainer = Trainer(train_manifest, ncfg, tcfg, cell_dir, extractor)
                losses = trainer.run()
                rep = evaluate_model(trainer.generator, eval_manifest)
                cell.update(psnr=rep.psnr, ssim=rep.ssim, delta_e=rep.delta_e,
                            final_L_T=losses[-1]["L_T"] if losses else float("nan"))
            except Exception as e:  # keep the gap explicit
                log.error("ablation cell %s GD=%d failed: %s", row, m, e)
                cell.update(psnr=float("nan"), ssim=float("nan"), delta_e=float("nan"), error=str(e))
            table.append(cell)
    return table


def format_ablation(table: list[dict]) -> str:
    lines = [f"{'Model':<24}{'GD':>4}{'Params':>12}  PSNR/SSIM/DeltaE"]
    for c in table:
        metrics = f"{c['psnr']:.2f}/{c['ssim']:.4f}/{c['delta_e']:.2f}"
        if "error" in c:
            metrics = f"-- ({c['error']})"
        lines.append(f"{c['model']:<24}{c['gd']:>4}{c['params']:>12,}  {metrics}")
    return "\n".join(lines)
