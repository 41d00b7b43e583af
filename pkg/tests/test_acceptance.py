"""Acceptance criteria, one test each, at their stated tolerances and time limits.

Each test records a one-line verdict that the ``pytest_terminal_summary``
hook in conftest.py prints at the end of the run.
"""

import json
import time

import numpy as np
import pytest
import torch

from helpers import loss_gradient_errors
from jdd.cfa import B, G, R, CfaPattern, mosaic
from jdd.cli import main as cli
from jdd.color import ciede2000
from jdd.data import prepare
from jdd.files import write_image
from jdd.losses import LossReport, total_loss, tv_regulator
from jdd.metrics import evaluate_dataset, psnr, ssim
from jdd.network import DepthAttention, Generator, NetworkConfig, SpatialAttention, count_parameters
from jdd.training import TrainConfig, Trainer, baseline_reconstruct, params_digest, reconstruct
from test_color import SHARMA_PAIRS

RESULTS: list[str] = []

SAMPLE_IMAGES = ["astronaut", "chelsea", "coffee", "rocket", "colorwheel", "immunohistochemistry"]


class Verdict:
    def __init__(self, number: int, title: str, limit_s: float):
        self.number, self.title, self.limit = number, title, limit_s
        self.details: list[str] = []
        self.ok = True

    def check(self, cond: bool, detail: str) -> None:
        self.details.append(("" if cond else "FAILED ") + detail)
        self.ok &= bool(cond)

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        if exc_type is None:
            self.check(elapsed < self.limit, f"{elapsed:.1f}s < {self.limit:g}s")
        else:
            self.ok = False
            self.details.append(f"error: {exc_type.__name__}: {exc}")
        line = f"criterion {self.number} {'PASS' if self.ok else 'FAIL'}: {self.title} [{'; '.join(self.details)}]"
        RESULTS.append(line)
        print(line)
        if exc_type is None:
            assert self.ok, line
        return False


@pytest.fixture(scope="module")
def sample_corpus(tmp_path_factory):
    from skimage import data

    root = tmp_path_factory.mktemp("corpus")
    for name in SAMPLE_IMAGES:
        img = getattr(data, name)()
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        write_image(root / f"{name}.png", img[..., :3] / 255.0, bits=8)
    return root


def test_criterion_1_ciede2000_vectors():
    with Verdict(1, "34 CIEDE2000 reference pairs within 1e-4", 1.0) as v:
        got = ciede2000(SHARMA_PAIRS[:, :3], SHARMA_PAIRS[:, 3:6])
        err = float(np.max(np.abs(got - SHARMA_PAIRS[:, 6])))
        v.check(len(SHARMA_PAIRS) == 34, "34 pairs")
        v.check(err < 1e-4, f"max error {err:.2e}")


def test_criterion_2_cfa_layouts():
    with Verdict(2, "CFA site checks and Quad-to-Bayer block consistency", 1.0) as v:
        layouts = {
            CfaPattern.BAYER_RGGB: [[R, G], [G, B]],
            CfaPattern.QUAD_BAYER: [[R, R, G, G], [R, R, G, G], [G, G, B, B], [G, G, B, B]],
        }
        rng = np.random.default_rng(0)
        for pattern, layout in layouts.items():
            t = pattern.period
            img = rng.random((t, t, 3))
            plane = mosaic(img, pattern).plane
            ok = all(plane[y, x] == img[y, x, layout[y][x]] and pattern.channel_at(y, x) == layout[y][x]
                     for y in range(t) for x in range(t))
            v.check(ok, f"{pattern.value}: {t * t} sites")
        quad = CfaPattern.QUAD_BAYER.index_grid(8, 8)
        blocks = quad.reshape(4, 2, 4, 2).transpose(0, 2, 1, 3).reshape(4, 4, 4)
        consistent = all(len(set(b.tolist())) == 1 for row in blocks for b in row)
        reduced = blocks[..., 0]
        v.check(consistent and np.array_equal(reduced, CfaPattern.BAYER_RGGB.index_grid(4, 4)),
                "2x2 blocks uniform and reduce to Bayer")


def test_criterion_3_loss_identities(tiny_extractor):
    with Verdict(3, "loss identities", 10.0) as v:
        g = torch.Generator().manual_seed(0)
        a = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        b = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
        ext = tiny_extractor.double()
        perfect = total_loss(a, a, torch.ones(2, dtype=torch.float64), ext)
        v.check(float(perfect.L_T) == 0.0, f"L_T(I,I,D=1) = {float(perfect.L_T)}")
        rep: LossReport = total_loss(a, b, torch.tensor([0.2, 0.7], dtype=torch.float64), ext)
        v.check(rep.decomposition_error() < 1e-6, f"decomposition error {rep.decomposition_error():.1e}")
        tv = float(tv_regulator(torch.full((1, 3, 16, 16), 0.37), (4, 8, 8))[0])
        v.check(tv == 0.0, f"tv(constant) = {tv}")


def test_criterion_4_gradient_fidelity():
    with Verdict(4, "analytic vs central-difference gradients, 100 probes per term", 300.0) as v:
        errors = loss_gradient_errors(n_probes=100, seed=0, size=16)
        for name, err in errors.items():
            v.check(err < 1e-3, f"{name} max rel err {err:.1e}")


def test_criterion_5_architecture_laws():
    with Verdict(5, "generator shape, gate ranges, gradient coverage, affine parameter count", 120.0) as v:
        torch.manual_seed(0)
        cfg = NetworkConfig()
        g = Generator(cfg)
        rng = np.random.default_rng(0)
        sizes = [(4 * int(rng.integers(1, 17)), 4 * int(rng.integers(1, 17))) for _ in range(5)]
        gates = []
        hooks = [m.register_forward_hook(lambda mod, i, o: gates.append(mod.gate(i[0])))
                 for m in g.modules() if isinstance(m, DepthAttention)]
        hooks += [m.register_forward_hook(lambda mod, i, o: gates.append(mod.attention_map(i[0])))
                  for m in g.modules() if isinstance(m, SpatialAttention)]
        shapes_ok = True
        with torch.no_grad():
            for h, w in sizes:
                shapes_ok &= g(torch.randn(1, 3, h, w) * 3).shape == (1, 3, h, w)
        for hk in hooks:
            hk.remove()
        v.check(shapes_ok, f"shape preserved for {sizes}")
        v.check(all(t.min() >= 0 and t.max() <= 1 for t in gates), f"{len(gates)} gate maps in [0,1]")

        for _ in range(3):
            x, target = torch.rand(2, 3, 16, 16), torch.rand(2, 3, 16, 16)
            (g(x) - target).abs().mean().backward()
        dead = [n for n, p in g.named_parameters() if p.grad is None or not p.grad.abs().sum() > 0]
        v.check(not dead, f"all {len(list(g.parameters()))} tensors receive gradient" + (f" except {dead[:3]}" if dead else ""))

        counts = [count_parameters(Generator(NetworkConfig(group_density=m))) for m in (1, 2, 3)]
        d1, d2 = counts[1] - counts[0], counts[2] - counts[1]
        v.check(d1 == d2, f"counts {counts}, delta {d1} == {d2}")
        v.check(2_500_000 <= counts[2] <= 4_500_000, f"m=3 count {counts[2]:,} in 2.5M-4.5M")


@pytest.mark.slow
def test_criterion_6_overfit(tmp_path, sample_corpus):
    with Verdict(6, "overfit 16 Quad Bayer patches at sigma=15 for 2000 steps", 1800.0) as v:
        manifest = prepare(sample_corpus, tmp_path / "prep", "quad", 16, seed=0, sigma=15.0)
        pick = sorted(np.random.default_rng(0).choice(len(manifest), 16, replace=False))
        subset = manifest.subset([manifest.records[i] for i in pick], "overfit")
        cfg = TrainConfig(batch=16, steps=2000, seed=0, degradation="stored", hflip=False)
        trainer = Trainer(subset, NetworkConfig(), cfg)
        reports = trainer.run()
        ratio = reports[-1]["L_R"] / reports[0]["L_R"]
        v.check(ratio < 0.2, f"L_R {reports[0]['L_R']:.4f} -> {reports[-1]['L_R']:.4f} (ratio {ratio:.3f})")
        net, base = [], []
        for rec in subset.records:
            m, clean = subset.load_pair(rec)
            net.append(psnr(clean, reconstruct(trainer.generator, m)))
            base.append(psnr(clean, baseline_reconstruct(m)))
        gain = float(np.mean(net) - np.mean(base))
        v.check(gain >= 3.0, f"PSNR {np.mean(net):.2f} dB vs baseline {np.mean(base):.2f} dB (+{gain:.2f})")


def test_criterion_7_metric_sanity():
    with Verdict(7, "PSNR 20 dB closed form, SSIM(x,x)=1, dataset means", 10.0) as v:
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 0.9, (64, 64, 3))
        p = psnr(x, x + 0.1)
        v.check(abs(p - 20.0) < 1e-9, f"PSNR(x, x+0.1) = {p!r}")
        v.check(ssim(x, x) == 1.0, "SSIM(x,x) == 1")
        refs = [rng.random((32, 32, 3)) for _ in range(4)]
        outs = [np.clip(r + rng.normal(0, 0.05, r.shape), 0, 1) for r in refs]
        rep = evaluate_dataset(outs, refs)
        diffs = [abs(rep.psnr - np.mean([m.psnr for m in rep.images])),
                 abs(rep.ssim - np.mean([m.ssim for m in rep.images])),
                 abs(rep.delta_e - np.mean([m.delta_e for m in rep.images]))]
        v.check(max(diffs) < 1e-9, f"mean deviation {max(diffs):.1e}")


def _pipeline(root, corpus):
    prep = root / "prep"
    assert cli(["prepare", "--src", str(corpus), "--out", str(prep), "--pattern", "quad",
                "--patch", "32", "--seed", "7", "--limit", "24"]) == 0
    run = {"train": {"batch": 4, "steps": 50, "seed": 7},
           "data": {"manifest": str(prep / "manifest.jsonl")}, "output_dir": str(root / "run")}
    (root / "run.json").write_text(json.dumps(run))
    assert cli(["train", "--config", str(root / "run.json")]) == 0
    assert cli(["eval", "--checkpoint", str(root / "run" / "checkpoint.pt"),
                "--manifest", str(prep / "manifest.jsonl"), "--out", str(root / "metrics.jsonl")]) == 0
    return {
        "manifest": (prep / "manifest.jsonl").read_bytes(),
        "losses": (root / "run" / "train_log.jsonl").read_text(),
        "checkpoint": (root / "run" / "checkpoint.pt").read_bytes(),
        "metrics": (root / "metrics.jsonl").read_text(),
    }


@pytest.mark.slow
def test_criterion_8_pipeline_reproducibility(tmp_path, sample_corpus):
    with Verdict(8, "prepare -> train(50) -> eval twice is bit-identical", 600.0) as v:
        first = _pipeline(tmp_path / "a", sample_corpus)
        second = _pipeline(tmp_path / "b", sample_corpus)
        for key in ("manifest", "losses", "checkpoint", "metrics"):
            v.check(first[key] == second[key], f"{key} identical")
        n_steps = len(first["losses"].splitlines()) - 1
        v.check(n_steps == 50, f"{n_steps} loss reports")


@pytest.mark.slow
def test_criterion_9_resume_invariance(tmp_path, sample_corpus):
    with Verdict(9, "50 steps == 30 + 20 resumed steps", 600.0) as v:
        manifest = prepare(sample_corpus, tmp_path / "prep", "quad", 32, seed=1, limit=24)
        cfg = TrainConfig(batch=4, steps=50, seed=1)
        full = Trainer(manifest, NetworkConfig(), cfg)
        full.run()
        part = Trainer(manifest, NetworkConfig(), cfg, tmp_path / "part")
        part.run(30)
        resumed = Trainer(manifest, NetworkConfig(), cfg).resume(tmp_path / "part" / "checkpoint.pt")
        resumed.run()
        v.check(resumed.step_count == 50, "resumed run reaches step 50")
        v.check(params_digest(resumed.generator) == params_digest(full.generator), "generator bit-equal")
        v.check(params_digest(resumed.discriminator) == params_digest(full.discriminator),
                "discriminator bit-equal")
