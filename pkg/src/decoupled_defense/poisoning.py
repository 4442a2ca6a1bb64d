"""Datasets, triggers and dataset poisoning.

Images are float32 arrays of shape (n, H, W, C) with values in [0, 1].
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audit


class ConfigError(ValueError):
    """Invalid user-supplied configuration (CLI exit code 2)."""


def round_half_up(x: float) -> int:
    # n * alpha carries float noise (100 * 0.1 = 10.000000000000002)
    return int(math.floor(round(x, 9) + 0.5))


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    _poison_mask: np.ndarray | None = field(default=None, repr=False)
    _target_class: int | None = field(default=None, repr=False)
    trigger: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.images)
        if self.images.ndim != 4:
            raise ConfigError(f"images must be (n, H, W, C), got shape {self.images.shape}")
        if self.labels.shape != (n,):
            raise ConfigError(f"expected {n} labels, got shape {self.labels.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ConfigError(f"labels must lie in [0, {self.class_count})")
        if self._poison_mask is None:
            self._poison_mask = np.zeros(n, dtype=bool)
        self._poison_mask = np.asarray(self._poison_mask, dtype=bool)
        if self._poison_mask.shape != (n,):
            raise ConfigError("poison_mask length must equal the number of samples")

    def __len__(self):
        return len(self.labels)

    @property
    def poison_mask(self) -> np.ndarray:
        audit.check("poison_mask")
        return self._poison_mask

    @property
    def target_class(self) -> int | None:
        audit.check("target_class")
        return self._target_class

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> LabeledDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.images[idx], self.labels[idx], self.class_count,
            self._poison_mask[idx], self._target_class, self.trigger,
        )

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        np.save(path / "images.npy", self.images)
        np.save(path / "labels.npy", self.labels)
        np.save(path / "poison_mask.npy", self._poison_mask)
        meta = {
            "format": "labeled-dataset/1",
            "n": len(self),
            "image_shape": list(self.image_shape),
            "class_count": self.class_count,
            "target_class": self._target_class,
            "trigger": self.trigger,
        }
        (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> LabeledDataset:
        path = Path(path)
        if not (path / "meta.json").is_file():
            raise FileNotFoundError(f"{path} is not a dataset directory (no meta.json)")
        meta = json.loads((path / "meta.json").read_text())
        return cls(
            np.load(path / "images.npy"),
            np.load(path / "labels.npy"),
            int(meta["class_count"]),
            np.load(path / "poison_mask.npy"),
            meta.get("target_class"),
            meta.get("trigger"),
        )


def subset_views(ds: LabeledDataset) -> tuple[np.ndarray, np.ndarray]:
    """Index lists (clean, poisoned) partitioning ``ds`` by its poison mask."""
    mask = ds.poison_mask
    return np.flatnonzero(~mask), np.flatnonzero(mask)


# --- triggers -------------------------------------------------------------

PATCH, BLENDED, SINUSOID = "patch", "blended", "sinusoid"


def checkerboard(size: int = 3) -> np.ndarray:
    ii, jj = np.indices((size, size))
    return ((ii + jj + 1) % 2).astype(np.float32)


def default_blend_image(shape, seed: int = 20170517) -> np.ndarray:
    """Fixed uniform-noise key image used by the blended attack."""
    return np.random.default_rng(seed).random(shape, dtype=np.float32)


@dataclass
class TriggerSpec:
    variant: str
    patch: np.ndarray | None = None
    # top-left corner of the patch; None anchors it at the bottom-right corner
    anchor: tuple[int, int] | None = None
    blend_image: np.ndarray | None = None
    blend_ratio: float | None = None
    amplitude: float | None = None
    frequency: float | None = None

    def __post_init__(self):
        populated = {
            PATCH: self.patch is not None,
            BLENDED: self.blend_image is not None or self.blend_ratio is not None,
            SINUSOID: self.amplitude is not None or self.frequency is not None,
        }
        if self.variant not in populated:
            raise ConfigError(f"unknown trigger variant {self.variant!r}")
        extra = [k for k, v in populated.items() if v and k != self.variant]
        if not populated[self.variant] or extra:
            raise ConfigError(f"trigger spec for {self.variant!r} must populate exactly its own parameters")
        if self.variant == PATCH:
            self.patch = np.asarray(self.patch, dtype=np.float32)
            if self.patch.ndim not in (2, 3):
                raise ConfigError("patch must be (h, w) or (h, w, C)")
        elif self.variant == BLENDED:
            if self.blend_image is None or self.blend_ratio is None:
                raise ConfigError("blended trigger needs blend_image and blend_ratio")
            if not 0.0 <= self.blend_ratio <= 1.0:
                raise ConfigError(f"blend_ratio must be in [0, 1], got {self.blend_ratio}")
            self.blend_image = np.asarray(self.blend_image, dtype=np.float32)
        elif self.amplitude is None or self.frequency is None:
            raise ConfigError("sinusoid trigger needs amplitude and frequency")

    @classmethod
    def badnets(cls, size: int = 3, anchor=None) -> TriggerSpec:
        return cls(PATCH, patch=checkerboard(size), anchor=anchor)

    @classmethod
    def blended(cls, image_shape, ratio: float = 0.1) -> TriggerSpec:
        return cls(BLENDED, blend_image=default_blend_image(tuple(image_shape)), blend_ratio=ratio)

    @classmethod
    def sig(cls, amplitude: float = 20 / 255, frequency: float = 6) -> TriggerSpec:
        return cls(SINUSOID, amplitude=amplitude, frequency=frequency)

    @classmethod
    def for_attack(cls, attack: str, image_shape) -> TriggerSpec:
        if attack == "badnets":
            return cls.badnets()
        if attack == "blended":
            return cls.blended(image_shape)
        if attack == "sig":
            return cls.sig()
        raise ConfigError(f"unknown attack {attack!r} (expected badnets, blended or sig)")

    def to_dict(self) -> dict:
        d = {"variant": self.variant}
        if self.variant == PATCH:
            d["patch"] = self.patch.tolist()
            d["anchor"] = None if self.anchor is None else list(self.anchor)
        elif self.variant == BLENDED:
            d["blend_image"] = self.blend_image.tolist()
            d["blend_ratio"] = self.blend_ratio
        else:
            d["amplitude"] = self.amplitude
            d["frequency"] = self.frequency
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TriggerSpec:
        d = dict(d)
        variant = d.pop("variant", None)
        allowed = {PATCH: {"patch", "anchor"}, BLENDED: {"blend_image", "blend_ratio"},
                   SINUSOID: {"amplitude", "frequency"}}.get(variant)
        if allowed is None:
            raise ConfigError(f"unknown trigger variant {variant!r}")
        if set(d) - allowed:
            raise ConfigError(f"unexpected keys for {variant} trigger: {sorted(set(d) - allowed)}")
        if d.get("anchor") is not None:
            d["anchor"] = tuple(d["anchor"])
        return cls(variant, **d)


def apply_trigger(image: np.ndarray, spec: TriggerSpec) -> np.ndarray:
    """Inject ``spec`` into one (H, W, C) image or a batch (n, H, W, C)."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim not in (3, 4):
        raise ConfigError(f"expected (H, W, C) or (n, H, W, C) image, got shape {image.shape}")
    H, W, C = image.shape[-3:]
    if spec.variant == PATCH:
        patch = spec.patch if spec.patch.ndim == 3 else spec.patch[..., None]
        ph, pw = patch.shape[:2]
        if patch.shape[2] not in (1, C):
            raise ConfigError(f"patch has {patch.shape[2]} channels, image has {C}")
        r, c = spec.anchor if spec.anchor is not None else (H - ph, W - pw)
        if r < 0 or c < 0 or r + ph > H or c + pw > W:
            raise ConfigError(f"{ph}x{pw} patch at ({r}, {c}) exceeds {H}x{W} image")
        out = image.copy()
        out[..., r:r + ph, c:c + pw, :] = patch
    elif spec.variant == BLENDED:
        if spec.blend_image.shape != (H, W, C):
            raise ConfigError(f"blend image shape {spec.blend_image.shape} != image shape {(H, W, C)}")
        lam = np.float32(spec.blend_ratio)
        out = (1 - lam) * image + lam * spec.blend_image
    else:
        cols = np.arange(W, dtype=np.float64)
        signal = spec.amplitude * np.sin(2 * np.pi * cols * spec.frequency / W)
        out = image + signal.astype(np.float32)[None, :, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# --- poisoning ------------------------------------------------------------

POISON_LABEL, CLEAN_LABEL = "poison_label", "clean_label"


@dataclass
class PoisonConfig:
    rate_alpha: float
    target_class: int
    label_mode: str = POISON_LABEL
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate_alpha <= 1.0:
            raise ConfigError(f"poisoning rate must be in [0, 1], got {self.rate_alpha}")
        if self.label_mode not in (POISON_LABEL, CLEAN_LABEL):
            raise ConfigError(f"label_mode must be {POISON_LABEL!r} or {CLEAN_LABEL!r}")


def poison_dataset(clean: LabeledDataset, cfg: PoisonConfig, spec: TriggerSpec) -> LabeledDataset:
    if clean._poison_mask.any():
        raise ConfigError("dataset is already poisoned")
    if not 0 <= cfg.target_class < clean.class_count:
        raise ConfigError(f"target class {cfg.target_class} outside [0, {clean.class_count})")
    n = len(clean)
    m = round_half_up(n * cfg.rate_alpha)
    if m == 0:
        return clean.subset(np.arange(n))

    rng = np.random.default_rng(cfg.seed)
    if cfg.label_mode == POISON_LABEL:
        chosen = rng.choice(n, size=m, replace=False)
    else:
        candidates = np.flatnonzero(clean.labels == cfg.target_class)
        if len(candidates) < m:
            raise ConfigError(
                f"clean-label poisoning needs {m} samples of class {cfg.target_class}, "
                f"only {len(candidates)} available (short by {m - len(candidates)})"
            )
        chosen = rng.choice(candidates, size=m, replace=False)
    chosen = np.sort(chosen)

    images = clean.images.copy()
    images[chosen] = apply_trigger(images[chosen], spec)
    labels = clean.labels.copy()
    if cfg.label_mode == POISON_LABEL:
        labels[chosen] = cfg.target_class
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    trigger = {"spec": spec.to_dict(), "rate_alpha": cfg.rate_alpha, "label_mode": cfg.label_mode, "seed": cfg.seed}
    return LabeledDataset(images, labels, clean.class_count, mask, cfg.target_class, trigger)
