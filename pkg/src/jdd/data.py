"""Patch extraction, degradation and manifest persistence.

A manifest is a JSON-lines file: one header record followed by one record
per patch, sorted by ``record_id``. All paths inside are relative to the
manifest's directory, so the same sources, seed and settings give a
byte-identical manifest wherever it is written.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cfa import CfaPattern, MosaicImage, NoiseSpec, degrade
from .files import list_images, read_image, read_mosaic, write_image, write_mosaic

log = logging.getLogger(__name__)

TRAIN_SIGMA_RANGE = (0.0, 25.0)
EVAL_SIGMAS = (5.0, 15.0, 25.0)


@dataclass(frozen=True)
class PatchRecord:
    record_id: str
    source: str
    y: int
    x: int
    size: int
    pattern: str
    sigma: float
    seed: int
    mosaic_path: str = ""
    clean_path: str = ""

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "PatchRecord":
        return cls(**d)


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    seed: int
    pattern: str
    patch_size: int
    split: str = "all"
    skipped: int = 0
    root: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def sources(self) -> list[str]:
        return sorted({r.source for r in self.records})

    def header(self) -> dict:
        return {
            "kind": "manifest",
            "seed": self.seed,
            "pattern": self.pattern,
            "patch_size": self.patch_size,
            "split": self.split,
            "skipped": self.skipped,
            "count": len(self.records),
        }

    def write(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        records = sorted(self.records, key=lambda r: r.record_id)
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines += [json.dumps(r.to_json(), sort_keys=True) for r in records]
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text("\n".join(lines) + "\n")
        tmp.replace(path)
        self.root = path.parent
        return path

    @classmethod
    def read(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
        if not lines:
            raise ValueError(f"empty manifest {path}")
        head = json.loads(lines[0])
        if head.get("kind") != "manifest":
            raise ValueError(f"{path} does not start with a manifest header")
        records = [PatchRecord.from_json(json.loads(ln)) for ln in lines[1:]]
        return cls(records, head["seed"], head["pattern"], head["patch_size"],
                   head.get("split", "all"), head.get("skipped", 0), root=path.parent)

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; write() or read() it first")
        return self.root / rel

    def load_pair(self, record: PatchRecord) -> tuple[MosaicImage, np.ndarray]:
        return read_mosaic(self.resolve(record.mosaic_path)), read_image(self.resolve(record.clean_path))

    def subset(self, records: Iterable[PatchRecord], split: str) -> "DatasetManifest":
        return DatasetManifest(list(records), self.seed, self.pattern, self.patch_size,
                               split, 0, root=self.root)


def _record_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def extract_patches(
    image_dir: str | Path,
    patch_size: int = 128,
    pattern: CfaPattern | str = CfaPattern.QUAD_BAYER,
    seed: int = 0,
    sigma: float | None = None,
    sigma_range: tuple[float, float] = TRAIN_SIGMA_RANGE,
) -> DatasetManifest:
    """Tile every readable image into non-overlapping ``patch_size`` crops.

    Partial borders are dropped. Each patch gets its own noise level (fixed
    ``sigma`` if given, otherwise uniform over ``sigma_range``) and noise
    seed, both derived from ``seed`` and the patch's position in the walk.
    """
    pattern = CfaPattern.parse(pattern)
    if patch_size <= 0 or patch_size % pattern.period or patch_size % 4:
        raise ValueError(f"patch size {patch_size} must be a positive multiple of 4 and the CFA period")
    root = Path(image_dir)
    records: list[PatchRecord] = []
    skipped = 0
    for path in list_images(root):
        try:
            h, w = read_image(path).shape[:2]
        except (OSError, ValueError):
            skipped += 1
            continue
        if h < patch_size or w < patch_size:
            skipped += 1
            continue
        source = path.relative_to(root).as_posix()
        for y in range(0, h - patch_size + 1, patch_size):
            for x in range(0, w - patch_size + 1, patch_size):
                rng = _record_rng(seed, len(records))
                s = float(sigma) if sigma is not None else float(rng.uniform(*sigma_range))
                records.append(PatchRecord(
                    record_id=f"{source}@{y:05d}_{x:05d}",
                    source=source, y=y, x=x, size=patch_size,
                    pattern=pattern.value, sigma=round(s, 6),
                    seed=int(rng.integers(0, 2**31 - 1)),
                ))
    if skipped:
        log.warning("skipped %d unreadable or undersized images in %s", skipped, root)
    return DatasetManifest(records, seed, pattern.value, patch_size, "all", skipped)


def _patch_stem(record: PatchRecord) -> str:
    safe = record.source.replace("/", "__").rsplit(".", 1)[0]
    return f"{safe}_{record.y:05d}_{record.x:05d}"


def degrade_patch(record: PatchRecord, clean_patch: np.ndarray, out_dir: str | Path) -> PatchRecord:
    """Write the clean patch and its noisy mosaic; return the record with paths."""
    out_dir = Path(out_dir)
    stem = _patch_stem(record)
    clean_rel = f"clean/{stem}.png"
    mosaic_rel = f"mosaic/{stem}.png"
    # quantize once so the mosaic is sampled from exactly what is stored
    clean_q = np.round(np.clip(clean_patch, 0, 1) * 65535.0) / 65535.0
    try:
        write_image(out_dir / clean_rel, clean_q, bits=16)
        m = degrade(clean_q, CfaPattern.parse(record.pattern), NoiseSpec(record.sigma, record.seed))
        write_mosaic(out_dir / mosaic_rel, m)
    except OSError as e:
        raise OSError(f"record {record.record_id}: {e}") from e
    return dataclasses.replace(record, mosaic_path=mosaic_rel, clean_path=clean_rel)


def prepare(
    src: str | Path,
    out: str | Path,
    pattern: CfaPattern | str = CfaPattern.QUAD_BAYER,
    patch_size: int = 128,
    seed: int = 0,
    sigma: float | None = None,
    limit: int | None = None,
) -> DatasetManifest:
    """Extract, degrade and write ``out/manifest.jsonl``."""
    src, out = Path(src), Path(out)
    manifest = extract_patches(src, patch_size, pattern, seed, sigma)
    records = manifest.records[:limit] if limit else manifest.records
    cache: dict[str, np.ndarray] = {}
    done = []
    for rec in records:
        if rec.source not in cache:
            cache.clear()
            cache[rec.source] = read_image(src / rec.source)
        img = cache[rec.source]
        patch = img[rec.y:rec.y + rec.size, rec.x:rec.x + rec.size]
        done.append(degrade_patch(rec, patch, out))
    manifest.records = sorted(done, key=lambda r: r.record_id)
    manifest.write(out / "manifest.jsonl")
    return manifest


def split(
    manifest: DatasetManifest,
    fractions: Sequence[float] = (0.8, 0.2),
    seed: int = 0,
    names: Sequence[str] = ("train", "val"),
) -> tuple[DatasetManifest, ...]:
    """Shuffle source images and partition them; patches follow their source."""
    if len(fractions) != len(names):
        raise ValueError("need one name per fraction")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    sources = manifest.sources
    order = np.random.default_rng(seed).permutation(len(sources))
    shuffled = [sources[i] for i in order]
    bounds = np.round(np.cumsum([0.0, *fractions]) * len(sources)).astype(int)
    parts = []
    for name, lo, hi in zip(names, bounds[:-1], bounds[1:]):
        chosen = set(shuffled[lo:hi])
        if not chosen:
            raise ValueError(f"split {name!r} would be empty ({len(sources)} sources, {fractions})")
        parts.append(manifest.subset((r for r in manifest.records if r.source in chosen), name))
    return tuple(parts)
