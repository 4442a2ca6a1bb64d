"""Image sources: a procedural 10-class shapes set and the CIFAR-10 python batches.

The shapes set stands in for CIFAR-10 where the real data is unavailable. Each
class is a shape family; colour, placement, scale, rotation, background texture,
a distractor blob and pixel noise are nuisance factors.
"""
from __future__ import annotations

import pickle
from pathlib import Path

import numpy as np

from .poisoning import LabeledDataset

# shape half-extent as a fraction of the half-image
SCALE_RANGE = (0.45, 0.7)
SHAPE_CLASSES = (
    "disk", "ring", "square", "frame", "triangle",
    "plus", "cross", "hstripes", "vstripes", "pair",
)


def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.hypot(u, v)
    box = np.maximum(np.abs(u), np.abs(v))
    if cls == 0:
        return r < 0.9
    if cls == 1:
        return (r < 0.95) & (r > 0.55)
    if cls == 2:
        return box < 0.75
    if cls == 3:
        return (box < 0.8) & (box > 0.45)
    if cls == 4:
        return (v < 0.7) & (v > 1.6 * np.abs(u) - 0.9)
    if cls == 5:
        return ((np.abs(u) < 0.24) | (np.abs(v) < 0.24)) & (box < 0.9)
    if cls == 6:
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((np.abs(a) < 0.24) | (np.abs(b) < 0.24)) & (np.maximum(np.abs(a), np.abs(b)) < 0.95)
    if cls == 7:
        return (r < 0.95) & (np.cos(v * np.pi * 2.2) > 0)
    if cls == 8:
        return (r < 0.95) & (np.cos(u * np.pi * 2.2) > 0)
    if cls == 9:
        return (np.hypot(u - 0.5, v) < 0.4) | (np.hypot(u + 0.5, v) < 0.4)
    raise ValueError(cls)


def render_shape(cls: int, rng: np.random.Generator, size: int = 32, difficulty: float = 1.0) -> np.ndarray:
    """Render one sample at 32x32 and area-downsample to ``size`` (a divisor of 32)."""
    img = _render32(cls, rng, difficulty)
    if size != 32:
        f = 32 // size
        if f * size != 32:
            raise ValueError("size must divide 32")
        img = img.reshape(size, f, size, f, 3).mean(axis=(1, 3))
    return img.astype(np.float32)


def _render32(cls, rng, difficulty):
    size = 32
    yy, xx = (np.mgrid[0:size, 0:size] + 0.5) / size * 2 - 1
    # background: two-colour gradient plus smooth noise
    c0, c1 = rng.random(3), rng.random(3)
    theta = rng.uniform(0, 2 * np.pi)
    t = (np.cos(theta) * xx + np.sin(theta) * yy + 1.5) / 3
    img = c0 * (1 - t[..., None]) + c1 * t[..., None]
    coarse = rng.normal(0, 0.12 * difficulty, (size // 8, size // 8, 3))
    img += np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]

    # distractor blob, present with probability ``difficulty``
    cx, cy, rad = rng.uniform(-0.9, 0.9), rng.uniform(-0.9, 0.9), rng.uniform(0.08, 0.25)
    blob_color = rng.random(3)
    if rng.random() < difficulty:
        img[np.hypot(xx - cx, yy - cy) < rad] = blob_color

    scale = rng.uniform(*SCALE_RANGE)
    cx, cy = rng.uniform(-0.4, 0.4, 2)
    rot = rng.uniform(-0.35, 0.35) * difficulty
    xs, ys = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(rot) * xs + np.sin(rot) * ys
    v = -np.sin(rot) * xs + np.cos(rot) * ys
    mask = _shape_mask(cls, u, v)
    fg = rng.random(3)
    # keep the shape distinguishable from the local background on average
    bg_mean = img[mask].mean(axis=0) if mask.any() else img.mean(axis=(0, 1))
    if np.abs(fg - bg_mean).max() < 0.35:
        fg = np.where(bg_mean > 0.5, bg_mean - 0.45, bg_mean + 0.45)
    alpha = rng.uniform(0.6, 1.0)
    img[mask] = alpha * fg + (1 - alpha) * img[mask]

    img += rng.normal(0, 0.06 * difficulty, img.shape)
    return np.clip(img, 0, 1)


def make_shapes(n: int, seed: int = 0, size: int = 32, difficulty: float = 1.0) -> LabeledDataset:
    """Class-balanced shapes dataset with ``n`` samples (labels cycle 0..9, shuffled)."""
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % len(SHAPE_CLASSES))
    images = np.stack([render_shape(int(c), rng, size, difficulty) for c in labels]) if n else \
        np.zeros((0, size, size, 3), np.float32)
    return LabeledDataset(images, labels, len(SHAPE_CLASSES))


def make_shapes_split(n_train: int = 5000, n_test: int = 2000, seed: int = 0, size: int = 32,
                      difficulty: float = 1.0) -> tuple[LabeledDataset, LabeledDataset]:
    # disjoint streams: train and test never share an RNG draw
    ss = np.random.SeedSequence(seed).spawn(2)
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in ss)
    return (make_shapes(n_train, train_seed, size, difficulty),
            make_shapes(n_test, test_seed, size, difficulty))


def load_cifar10(root, train: bool = True, limit: int | None = None, seed: int = 0) -> LabeledDataset:
    """Read the ``cifar-10-batches-py`` directory; ``limit`` takes a seeded random subset."""
    root = Path(root)
    names = [f"data_batch_{i}" for i in range(1, 6)] if train else ["test_batch"]
    xs, ys = [], []
    for name in names:
        with open(root / name, "rb") as fh:
            batch = pickle.load(fh, encoding="bytes")
        xs.append(batch[b"data"])
        ys.extend(batch[b"labels"])
    images = np.concatenate(xs).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    labels = np.asarray(ys, dtype=np.int64)
    if limit is not None and limit < len(labels):
        idx = np.sort(np.random.default_rng(seed).choice(len(labels), limit, replace=False))
        images, labels = images[idx], labels[idx]
    return LabeledDataset(images.astype(np.float32) / 255.0, labels, 10)
