"""Seeded image augmentation on (n, C, H, W) float tensors in [0, 1].

All randomness comes from the ``numpy.random.Generator`` handed in, so a given
seed always reproduces the same stream.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.v2.functional as TF

# RandAugment-style pool, one op per image, followed by random erasing. The
# image is only 16 px wide, so heavier policies leave too little of the shape.
STRONG_OPS = (
    "identity", "autocontrast", "equalize", "rotate", "solarize", "color", "posterize",
    "contrast", "brightness", "sharpness", "shear_x", "shear_y", "translate_x", "translate_y",
)
STRONG_AUG_VERSION = "randaugment-n1-erase0.25/v3"
OPS_PER_IMAGE = 1
ERASE_FRAC = 0.25
# Geometric ranges are kept small because several shape classes differ only by
# orientation (plus/cross, horizontal/vertical stripes).
MAX_ROTATE = 15.0
MAX_SHEAR = 10.0
GEOM_FILL = [0.5, 0.5, 0.5]
STRONG_AUG_DESCRIPTION = {
    "version": STRONG_AUG_VERSION,
    "base": "weak (flip + translate 12.5%)",
    "ops": list(STRONG_OPS),
    "ops_per_image": OPS_PER_IMAGE,
    "magnitude": "uniform per draw",
    "rotate_max_deg": MAX_ROTATE,
    "shear_max_deg": MAX_SHEAR,
    "erase": f"square, side uniform in [1, {ERASE_FRAC} * H], uniform noise fill",
}


def flip_and_translate(x: torch.Tensor, rng: np.random.Generator, pad: int, mode: str = "reflect"):
    """Random horizontal flip, then pad by ``pad`` pixels and crop back at a random offset."""
    n, _, H, W = x.shape
    flips = rng.random(n) < 0.5
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    x = x.clone()
    if flips.any():
        idx = torch.from_numpy(np.flatnonzero(flips))
        x[idx] = torch.flip(x[idx], dims=[3])
    if pad > 0:
        padded = F.pad(x, (pad, pad, pad, pad), mode=mode) if mode != "constant" else F.pad(x, (pad,) * 4)
        x = torch.stack([padded[i, :, r:r + H, c:c + W] for i, (r, c) in enumerate(offsets)])
    params = [{"flip": bool(f), "dy": int(r) - pad, "dx": int(c) - pad} for f, (r, c) in zip(flips, offsets)]
    return x, params


def _posterize(img, bits):
    q = 2 ** (8 - bits)
    return torch.floor(img * 255 / q) * q / 255


def _strong_op(img: torch.Tensor, op: str, m: float, sign: float) -> torch.Tensor:
    # m in [0, 1] scales each op's range
    H = img.shape[-1]
    if op == "identity":
        return img
    if op == "autocontrast":
        return TF.autocontrast(img)
    if op == "equalize":
        return TF.equalize((img * 255).round().to(torch.uint8)).float() / 255
    if op == "rotate":
        return TF.rotate(img, sign * MAX_ROTATE * m, fill=GEOM_FILL)
    if op == "solarize":
        return TF.solarize(img, 1.0 - m)
    if op == "color":
        return TF.adjust_saturation(img, 0.05 + 0.9 * m * 2)
    if op == "posterize":
        return _posterize(img, 8 - int(round(4 * m)))
    if op == "contrast":
        return TF.adjust_contrast(img, 0.05 + 0.9 * m * 2)
    if op == "brightness":
        return TF.adjust_brightness(img, 0.05 + 0.9 * m * 2)
    if op == "sharpness":
        return TF.adjust_sharpness(img, 0.05 + 0.9 * m * 2)
    if op == "shear_x":
        return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0, shear=[sign * MAX_SHEAR * m, 0.0], fill=GEOM_FILL)
    if op == "shear_y":
        return TF.affine(img, angle=0.0, translate=[0, 0], scale=1.0, shear=[0.0, sign * MAX_SHEAR * m], fill=GEOM_FILL)
    if op == "translate_x":
        return TF.affine(img, angle=0.0, translate=[int(sign * 0.3 * m * H), 0], scale=1.0, shear=[0.0, 0.0],
                         fill=GEOM_FILL)
    if op == "translate_y":
        return TF.affine(img, angle=0.0, translate=[0, int(sign * 0.3 * m * H)], scale=1.0, shear=[0.0, 0.0],
                         fill=GEOM_FILL)
    raise ValueError(op)


def random_erase(x: torch.Tensor, rng: np.random.Generator, frac: float = 0.5) -> torch.Tensor:
    """Overwrite one square per image with uniform noise; side drawn from [1, frac * H]."""
    n, C, H, W = x.shape
    max_side = max(1, int(round(frac * H)))
    sides = rng.integers(1, max_side + 1, size=n)
    centers = rng.integers(0, [H, W], size=(n, 2))
    x = x.clone()
    for i, ((cy, cx), side) in enumerate(zip(centers, sides)):
        y0, y1 = max(0, cy - side // 2), min(H, cy + side - side // 2)
        x0, x1 = max(0, cx - side // 2), min(W, cx + side - side // 2)
        noise = rng.random((C, y1 - y0, x1 - x0), dtype=np.float32)
        x[i, :, y0:y1, x0:x1] = torch.from_numpy(noise)
    return x


def weak(x: torch.Tensor, rng: np.random.Generator):
    return flip_and_translate(x, rng, pad=max(1, x.shape[-1] // 8))


def strong(x: torch.Tensor, rng: np.random.Generator):
    x, params = weak(x, rng)
    out = []
    for i, img in enumerate(x):
        ops = rng.choice(len(STRONG_OPS), size=OPS_PER_IMAGE, replace=True)
        mags = rng.random(OPS_PER_IMAGE)
        signs = np.where(rng.random(OPS_PER_IMAGE) < 0.5, -1.0, 1.0)
        for o, m, s in zip(ops, mags, signs):
            img = _strong_op(img, STRONG_OPS[o], float(m), float(s)).clamp(0, 1)
        params[i]["ops"] = [STRONG_OPS[o] for o in ops]
        out.append(img)
    return random_erase(torch.stack(out), rng, ERASE_FRAC), params


def augment_batch(x: torch.Tensor, strength: str, rng: np.random.Generator, return_params: bool = False):
    if strength == "weak":
        out, params = weak(x, rng)
    elif strength == "strong":
        out, params = strong(x, rng)
    elif strength == "standard":
        # 4 px at 32x32, the usual CIFAR pad-and-crop
        out, params = flip_and_translate(x, rng, pad=max(1, x.shape[-1] // 8), mode="constant")
    elif strength == "none":
        out, params = x, [{} for _ in range(len(x))]
    else:
        raise ValueError(f"unknown augmentation strength {strength!r}")
    out = out.clamp(0, 1)
    return (out, params) if return_params else out


def augment(image: np.ndarray, strength: str, seed: int, return_params: bool = False):
    """Augment a single (H, W, C) image; deterministic in ``seed``."""
    x = torch.from_numpy(np.ascontiguousarray(np.asarray(image, np.float32).transpose(2, 0, 1)))[None]
    out, params = augment_batch(x, strength, np.random.default_rng(seed), return_params=True)
    img = out[0].permute(1, 2, 0).numpy()
    return (img, params[0]) if return_params else img
