"""Shared fixtures-in-code for the unit and acceptance tests."""

import numpy as np
import torch
import torch.nn as nn

from jdd.color import srgb_to_lab
from jdd.files import write_image
from jdd.losses import FeatureExtractor
from jdd.network import NetworkConfig

TINY_NET = dict(depths=(8, 16), group_density=1, reduction=4, disc_layers=2, disc_base_width=4)
BRANCH_MARGIN = 1e-4


def tiny_net() -> NetworkConfig:
    return NetworkConfig(**TINY_NET)


def make_tiny_extractor(seed: int = 0) -> FeatureExtractor:
    torch.manual_seed(seed)
    body = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.AvgPool2d(2))
    return FeatureExtractor(body)


def smooth_image(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Random low-frequency RGB image in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((h, w, 3))
    for c in range(3):
        a, b, p, q = rng.uniform(0.5, 4.0, size=4)
        img[..., c] = 0.5 + 0.25 * np.sin(a * 6.28 * yy + p) * np.cos(b * 6.28 * xx + q)
    img += rng.uniform(-0.05, 0.05, size=img.shape)
    return np.clip(img, 0, 1)


def write_corpus(directory, sizes, seed: int = 0):
    rng = np.random.default_rng(seed)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, (h, w) in enumerate(sizes):
        p = directory / f"img{i:02d}.png"
        write_image(p, smooth_image(rng, h, w), bits=8)
        paths.append(p)
    return paths


# -- finite-difference gradient probes ----------------------------------------

def _prime_chroma_hue(lab1, lab2):
    """C' and h' (degrees) of both colours after the CIEDE2000 a-axis rescale."""
    c1, c2 = np.hypot(lab1[1], lab1[2]), np.hypot(lab2[1], lab2[2])
    cbar7 = ((c1 + c2) / 2) ** 7
    g = 0.5 * (1 - np.sqrt(cbar7 / (cbar7 + 25.0 ** 7)))
    out = []
    for lab in (lab1, lab2):
        ap = (1 + g) * lab[1]
        out.append((np.hypot(ap, lab[2]), np.degrees(np.arctan2(lab[2], ap)) % 360))
    return out


def near_colour_branch(t_rgb, o_rgb, margin=BRANCH_MARGIN) -> bool:
    """True when a pixel pair sits near a kink of the sRGB -> CIEDE2000 chain."""
    if np.any(np.abs(o_rgb - 0.04045) < margin):
        return True
    l1, l2 = srgb_to_lab(t_rgb), srgb_to_lab(o_rgb)
    if np.linalg.norm(l1 - l2) < margin:
        return True
    (c1, h1), (c2, h2) = _prime_chroma_hue(l1, l2)
    if c1 < margin or c2 < margin:
        return True
    dh = abs(h1 - h2)
    if abs(dh - 180) < margin:
        return True
    return dh > 180 and abs(h1 + h2 - 360) < margin


def near_clip(o_val, margin=BRANCH_MARGIN) -> bool:
    return o_val < margin or o_val > 1 - margin


def finite_difference(fn, x: torch.Tensor, index, step=1e-5) -> float:
    with torch.no_grad():
        xp, xm = x.clone(), x.clone()
        xp[index] += step
        xm[index] -= step
        return (float(fn(xp)) - float(fn(xm))) / (2 * step)


def relative_error(a: float, b: float, floor=1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def gradient_probes(loss_fn, target, output, n_probes=100, seed=0, reject=None, fd_fn=None, step=1e-5):
    """Max relative error of autograd vs central differences over random probes.

    ``reject(index)`` skips probes near non-differentiable points; ``fd_fn``
    overrides the function differenced (defaults to ``loss_fn``).
    """
    out = output.clone().requires_grad_(True)
    loss_fn(out).backward()
    grad = out.grad
    fd_fn = fd_fn or loss_fn
    rng = np.random.default_rng(seed)
    errors = []
    tries = 0
    while len(errors) < n_probes:
        tries += 1
        if tries > 50 * n_probes:
            raise RuntimeError("too many rejected probes")
        index = tuple(int(rng.integers(0, s)) for s in output.shape)
        if near_clip(float(output[index])) or (reject and reject(index)):
            continue
        fd = finite_difference(fd_fn, output, index, step)
        errors.append(relative_error(float(grad[index]), fd))
    return max(errors), errors


def loss_gradient_errors(n_probes=100, seed=0, size=16):
    """Max relative FD error for L_R, L_PCL and L_RFL in double precision."""
    from jdd.losses import (
        FeatureExtractor, FeatureExtractorSpec, feature_loss, perceptual_colour_loss,
        reconstruction_loss, regularized_feature_loss, tv_regulator,
    )

    rng = np.random.default_rng(seed)
    target = torch.from_numpy(rng.uniform(0.05, 0.95, (2, 3, size, size)))
    output = torch.from_numpy(rng.uniform(0.05, 0.95, (2, 3, size, size)))
    t_np = target.numpy()

    def reject_l1(ix):
        return abs(float(target[ix] - output[ix])) < BRANCH_MARGIN

    def reject_colour(ix):
        b, _, y, x = ix
        return near_colour_branch(t_np[b, :, y, x], output[b, :, y, x].numpy())

    ext = FeatureExtractor.vgg19(FeatureExtractorSpec(init_seed=seed)).double()
    f_shape = tuple(ext(output[:1]).shape[1:])
    lam = tv_regulator(output, f_shape)  # frozen weight, as in training

    results = {}
    results["L_R"] = gradient_probes(lambda o: reconstruction_loss(target, o), target, output,
                                     n_probes, seed, reject_l1)[0]
    results["L_PCL"] = gradient_probes(lambda o: perceptual_colour_loss(target, o), target, output,
                                       n_probes, seed + 1, reject_colour)[0]
    results["L_RFL"] = gradient_probes(
        lambda o: regularized_feature_loss(target, o, ext)[0], target, output, n_probes, seed + 2,
        fd_fn=lambda o: (lam * feature_loss(target, o, ext)).mean(),
    )[0]
    return results
