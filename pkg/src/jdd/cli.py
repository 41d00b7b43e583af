"""``jdd`` command line: prepare, mosaic, train, eval, infer, ablate, report.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import random
import sys
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .cfa import CfaPattern, NoiseSpec, degrade
from .data import DatasetManifest, prepare, split
from .files import list_images, read_image, write_mosaic
from .metrics import evaluate_dataset
from .network import ConfigError, NetworkConfig
from .training import (
    TrainConfig,
    Trainer,
    TrainingDiverged,
    ablation_matrix,
    evaluate_model,
    format_ablation,
    infer,
    load_checkpoint,
)

log = logging.getLogger("jdd")

METRICS = ("psnr", "ssim", "delta_e")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# -- run config ------------------------------------------------------------------

@dataclass
class DataPaths:
    manifest: str
    val_manifest: str | None = None
    split: list[float] | None = None


@dataclass
class AblationSpec:
    densities: list[int] = field(default_factory=lambda: [1, 2, 3])
    rows: list[str] | None = None


@dataclass
class RunConfig:
    network: NetworkConfig
    train: TrainConfig
    data: DataPaths
    output_dir: str = "runs/default"
    resume: str | None = None
    ablation: AblationSpec = field(default_factory=AblationSpec)
    base_dir: Path = field(default=Path("."), repr=False)

    _KEYS = {"network", "train", "data", "output_dir", "resume", "ablation"}

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path = Path(".")) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        unknown = set(d) - cls._KEYS
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        if "data" not in d:
            raise ConfigError("run config needs a 'data' section")
        return cls(
            network=NetworkConfig.from_dict(d.get("network", {})),
            train=TrainConfig.from_dict(d.get("train", {})),
            data=_strict(DataPaths, d["data"], "data"),
            output_dir=d.get("output_dir", "runs/default"),
            resume=d.get("resume"),
            ablation=_strict(AblationSpec, d.get("ablation", {}), "ablation"),
            base_dir=base_dir,
        )

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, path.parent)

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else self.base_dir / q


def _strict(cls, d: dict, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"'{section}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as e:
        raise ConfigError(f"{section}: {e}") from None


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def _require_file(p: str | Path) -> Path:
    p = Path(p)
    if not p.is_file():
        raise FileNotFoundError(f"input not found: {p}")
    return p


def _require_dir(p: str | Path) -> Path:
    p = Path(p)
    if not p.is_dir():
        raise FileNotFoundError(f"directory not found: {p}")
    return p


# -- subcommands -------------------------------------------------------------------

def cmd_prepare(args) -> int:
    src = _require_dir(args.src)
    out = Path(args.out)
    manifest = prepare(src, out, args.pattern, args.patch, args.seed, args.sigma, args.limit)
    print(f"{len(manifest)} patches from {len(manifest.sources)} images "
          f"({manifest.skipped} skipped) -> {out / 'manifest.jsonl'}")
    if args.split is not None:
        train_m, val_m = split(manifest, (args.split, 1.0 - args.split), args.seed)
        train_m.write(out / "train_manifest.jsonl")
        val_m.write(out / "val_manifest.jsonl")
        print(f"split: {len(train_m)} train / {len(val_m)} val patches")
    return 0


def cmd_mosaic(args) -> int:
    img = read_image(_require_file(args.input))
    m = degrade(img, CfaPattern.parse(args.pattern), NoiseSpec(args.sigma, args.seed))
    write_mosaic(args.output, m)
    return 0


def _train_cfg(rc: RunConfig, args) -> TrainConfig:
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    return dataclasses.replace(rc.train, **over) if over else rc.train


def _manifests(rc: RunConfig, seed: int) -> tuple[DatasetManifest, DatasetManifest | None]:
    manifest = DatasetManifest.read(_require_file(rc.path(rc.data.manifest)))
    val = None
    if rc.data.val_manifest:
        val = DatasetManifest.read(_require_file(rc.path(rc.data.val_manifest)))
    elif rc.data.split:
        manifest, val = split(manifest, tuple(rc.data.split), seed)
    return manifest, val


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config)
    cfg = _train_cfg(rc, args)
    manifest, val = _manifests(rc, cfg.seed)
    out = rc.path(rc.output_dir)
    trainer = Trainer(manifest, rc.network, cfg, out)
    if rc.resume:
        trainer.resume(_require_file(rc.path(rc.resume)))
    reports = trainer.run()
    last = reports[-1] if reports else {}
    print(json.dumps({"steps": trainer.step_count, "checkpoint": str(out / "checkpoint.pt"), **last}))
    if val is not None and len(val):
        rep = evaluate_model(trainer.generator, val)
        rep.write_jsonl(out / "val_metrics.jsonl")
        print(_fmt_summary(rep.summary_record()))
    return 0


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return "inf" if math.isinf(x) else f"{x:.4f}"


def _fmt_summary(rec: dict) -> str:
    return f"mean over {rec['count']}: PSNR {_fmt(rec['psnr'])} dB  SSIM {_fmt(rec['ssim'])}  DeltaE {_fmt(rec['delta_e'])}"


def cmd_eval(args) -> int:
    tags = {"sigma": args.sigma, "dataset": args.dataset}
    if args.checkpoint or args.manifest:
        if not (args.checkpoint and args.manifest):
            raise UsageError("--checkpoint and --manifest go together")
        g, _ = load_checkpoint(_require_file(args.checkpoint))
        rep = evaluate_model(g, DatasetManifest.read(_require_file(args.manifest)))
    else:
        if not (args.pred and args.ref):
            raise UsageError("give --pred and --ref directories, or --checkpoint with --manifest")
        pred_dir, ref_dir = _require_dir(args.pred), _require_dir(args.ref)
        refs = list_images(ref_dir)
        if not refs:
            raise UsageError(f"no images in {ref_dir}")
        preds = []
        for r in refs:
            p = pred_dir / r.relative_to(ref_dir)
            preds.append(_require_file(p))
        rep = evaluate_dataset(
            [read_image(p) for p in preds], [read_image(r) for r in refs],
            [r.relative_to(ref_dir).as_posix() for r in refs], quantize=args.quantize8,
        )
    print(f"{'image':<40}{'PSNR':>10}{'SSIM':>10}{'DeltaE':>10}")
    for m in rep.images:
        print(f"{m.name:<40}{_fmt(m.psnr):>10}{_fmt(m.ssim):>10}{_fmt(m.delta_e):>10}")
    print(_fmt_summary(rep.summary_record()))
    if args.out:
        rep.write_jsonl(args.out, **tags)
    if args.plot_dir:
        recs = [m.to_record(**tags) for m in rep.images]
        for r in recs:
            r["psnr"] = float(r["psnr"])
        render_charts(group_report(recs), Path(args.plot_dir), args.width, args.height)
    return 0


def cmd_infer(args) -> int:
    files = [_require_file(f) for f in args.mosaics]
    written = infer(_require_file(args.checkpoint), files, args.out, args.tile, args.overlap)
    for w in written:
        print(w)
    return 0


def cmd_ablate(args) -> int:
    rc = RunConfig.load(args.config)
    cfg = _train_cfg(rc, args)
    manifest, val = _manifests(rc, cfg.seed)
    if val is None:
        raise ConfigError("ablation needs data.val_manifest or data.split")
    out = rc.path(rc.output_dir)
    rows = rc.ablation.rows
    kwargs = {"rows": rows} if rows else {}
    table = ablation_matrix(manifest, val, rc.network, cfg, rc.ablation.densities, out_dir=out, **kwargs)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.jsonl", "w") as f:
        for cell in table:
            f.write(json.dumps(cell) + "\n")
    print(format_ablation(table))
    return 0


def read_report(paths: list[Path]) -> tuple[list[dict], int]:
    records, bad = [], 0
    for path in paths:
        for line in _require_file(path).read_text().splitlines():
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError
                for k in METRICS:
                    rec[k] = float(rec[k])
            except (ValueError, KeyError, TypeError):
                bad += 1
                continue
            records.append(rec)
    return records, bad


def group_report(records: list[dict]) -> dict[tuple, dict[str, float]]:
    """Mean metrics per (sigma, dataset); image records win over summaries."""
    images = [r for r in records if r.get("kind", "image") == "image"]
    use = images or [r for r in records if r.get("kind") == "summary"]
    groups: dict[tuple, list[dict]] = defaultdict(list)
    for r in use:
        groups[(r.get("sigma"), r.get("dataset"))].append(r)
    out = {}
    for key in sorted(groups, key=lambda k: (str(k[0]), str(k[1]))):
        rs = groups[key]
        out[key] = {m: sum(r[m] for r in rs) / len(rs) for m in METRICS}
        out[key]["count"] = len(rs)
    return out


def render_charts(groups: dict, out_dir: Path, width: int, height: int, dpi: int = 100) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir.mkdir(parents=True, exist_ok=True)
    labels = [f"σ={s}\n{d}" if d is not None else f"σ={s}" for s, d in groups]
    paths = []
    for metric in METRICS:
        fig = plt.figure(figsize=(width / dpi, height / dpi), dpi=dpi)
        ax = fig.add_subplot(111)
        vals = [groups[k][metric] for k in groups]
        ax.bar(range(len(vals)), [v if math.isfinite(v) else 0.0 for v in vals])
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, fontsize=7)
        ax.set_ylabel(metric)
        p = out_dir / f"{metric}.png"
        fig.savefig(p, dpi=dpi)
        plt.close(fig)
        paths.append(p)
    return paths


def cmd_report(args) -> int:
    records, bad = read_report([Path(p) for p in args.reports])
    if bad:
        print(f"skipped {bad} malformed lines", file=sys.stderr)
    if not records:
        raise UsageError("no valid metric records")
    groups = group_report(records)
    print(f"{'sigma':>8}  {'dataset':<16}{'n':>5}{'PSNR':>10}{'SSIM':>10}{'DeltaE':>10}")
    for (s, d), v in groups.items():
        print(f"{str(s):>8}  {str(d):<16}{v['count']:>5}{_fmt(v['psnr']):>10}"
              f"{_fmt(v['ssim']):>10}{_fmt(v['delta_e']):>10}")
    if args.out:
        for p in render_charts(groups, Path(args.out), args.width, args.height, args.dpi):
            print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jdd", description="Joint demosaicking and denoising for pixel-bin sensors.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--seed", type=int, default=None, help="seed for every random source")
        sp.set_defaults(func=fn)
        return sp

    sp = add("prepare", cmd_prepare, "extract, degrade and index training patches")
    sp.add_argument("--src", required=True, help="directory of clean source images")
    sp.add_argument("--out", required=True, help="output directory for patches and manifest")
    sp.add_argument("--pattern", default="quad", choices=["bayer", "quad"], help="CFA layout")
    sp.add_argument("--patch", type=int, default=128, help="patch edge length in pixels")
    sp.add_argument("--sigma", type=float, default=None,
                    help="fixed noise level (8-bit scale); default uniform in [0, 25] per patch")
    sp.add_argument("--split", type=float, default=None,
                    help="train fraction; also writes train/val manifests split by source image")
    sp.add_argument("--limit", type=int, default=None, help="keep only the first N patches")

    sp = add("mosaic", cmd_mosaic, "sample an RGB image through a CFA and add noise")
    sp.add_argument("--pattern", default="quad", choices=["bayer", "quad"], help="CFA layout")
    sp.add_argument("--sigma", type=float, default=0.0, help="noise std on the 8-bit scale")
    sp.add_argument("input", help="RGB image (8 or 16 bit)")
    sp.add_argument("output", help="16-bit single-channel PNG; a .cfa sidecar is written next to it")

    sp = add("train", cmd_train, "train PIPNet from a run config")
    sp.add_argument("--config", required=True, help="run.json (network, train, data, output_dir)")
    sp.add_argument("--steps", type=int, default=None, help="override train.steps")

    sp = add("eval", cmd_eval, "score reconstructions against references")
    sp.add_argument("--pred", help="directory of reconstructed images")
    sp.add_argument("--ref", help="directory of reference images (same relative names)")
    sp.add_argument("--checkpoint", help="evaluate this checkpoint on --manifest instead")
    sp.add_argument("--manifest", help="manifest whose stored mosaics are reconstructed")
    sp.add_argument("--out", help="write per-image + summary JSON lines here")
    sp.add_argument("--sigma", type=float, default=None, help="noise level tag for the report")
    sp.add_argument("--dataset", default=None, help="dataset tag for the report")
    sp.add_argument("--quantize8", action="store_true", help="quantize both images to 8 bit first")
    sp.add_argument("--plot-dir", help="also write per-metric bar charts here")
    sp.add_argument("--width", type=int, default=640, help="chart width in pixels")
    sp.add_argument("--height", type=int, default=480, help="chart height in pixels")

    sp = add("infer", cmd_infer, "reconstruct RGB images from mosaic files")
    sp.add_argument("--checkpoint", required=True, help="trainer or generator checkpoint")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--tile", type=int, default=128, help="tile size for large images")
    sp.add_argument("--overlap", type=int, default=16, help="tile overlap in pixels")
    sp.add_argument("mosaics", nargs="+", help="mosaic PNGs with .cfa sidecars")

    sp = add("ablate", cmd_ablate, "run the attention/loss x group-density ablation matrix")
    sp.add_argument("--config", required=True, help="run.json; needs a validation manifest or split")
    sp.add_argument("--steps", type=int, default=None, help="override train.steps per cell")

    sp = add("report", cmd_report, "tabulate metric reports and draw bar charts")
    sp.add_argument("reports", nargs="+", help="metrics .jsonl files")
    sp.add_argument("--out", help="directory for per-metric PNG charts")
    sp.add_argument("--width", type=int, default=640, help="chart width in pixels")
    sp.add_argument("--height", type=int, default=480, help="chart height in pixels")
    sp.add_argument("--dpi", type=int, default=100, help="chart resolution")
    return p


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    seed = args.seed if args.seed is not None else 0
    seed_everything(seed)
    if args.command in ("prepare", "mosaic"):
        args.seed = seed
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, ValueError) as e:
        print(f"jdd {args.command}: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError) as e:
        print(f"jdd {args.command}: {e}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    return dispatch(argv)


if __name__ == "__main__":
    sys.exit(main())
