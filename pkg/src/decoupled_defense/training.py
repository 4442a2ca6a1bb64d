"""Stage SL: standard supervised training with per-subset accuracy tracking."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import audit
from .augment import augment_batch
from .models import ModelState, predict_logits, recalibrate_bn, to_tensor
from .poisoning import ConfigError, LabeledDataset, subset_views

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A training stage could not complete (CLI exit code 3)."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augmentation: str = "standard"
    seed: int = 0
    # constant schedule unless set; "cosine" anneals to zero over the run
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.augmentation not in ("none", "standard"):
            raise ConfigError(f"augmentation must be 'none' or 'standard', got {self.augmentation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class StageMetrics:
    stage: str
    # one dict per epoch; keys depend on the stage
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def column(self, key):
        return [e.get(key) for e in self.epochs]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


EvalHook = Callable[[ModelState], dict]


def check_finite(loss: torch.Tensor, stage: str, epoch: int) -> None:
    if not torch.isfinite(loss):
        raise StageError(f"{stage}: non-finite loss ({loss.item()}) at epoch {epoch}")


def subset_accuracies(model: ModelState, ds: LabeledDataset) -> dict:
    """Train-set accuracy against the given labels, split by the ground-truth mask.

    Instrumentation only: the returned numbers are logged, never trained on.
    """
    with audit.instrumentation():
        clean_idx, poison_idx = subset_views(ds)
    pred = predict_logits(model, ds.images).argmax(1).numpy()
    correct = pred == ds.labels
    out = {
        "train_acc": float(correct.mean()),
        "clean_subset_acc": float(correct[clean_idx].mean()) if len(clean_idx) else None,
        "poisoned_subset_acc": float(correct[poison_idx].mean()) if len(poison_idx) else None,
        "n_clean": int(len(clean_idx)),
        "n_poisoned": int(len(poison_idx)),
    }
    return out


def make_optimizer(net, lr, momentum, weight_decay):
    return torch.optim.SGD(net.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)


def supervised_train(model: ModelState, ds: LabeledDataset, cfg: TrainConfig,
                     evaluate: EvalHook | None = None, track_subsets: bool = True,
                     stage_tag: str = "SL") -> tuple[ModelState, StageMetrics]:
    if len(ds) == 0:
        raise ConfigError("cannot train on an empty dataset")
    if model.class_count != ds.class_count:
        raise ConfigError(f"model has {model.class_count} classes, dataset has {ds.class_count}")

    out = model.clone(stage_tag=stage_tag)
    metrics = StageMetrics(stage_tag)
    net = out.net
    opt = make_optimizer(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay)
    sched = None
    if cfg.lr_schedule == "cosine" and cfg.epochs > 0:
        sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs)
    rng = np.random.default_rng(cfg.seed)
    x_all = to_tensor(ds.images)
    y_all = torch.from_numpy(ds.labels)
    n = len(ds)

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        for epoch in range(1, cfg.epochs + 1):
            net.train()
            order = rng.permutation(n)
            total, seen = 0.0, 0
            for start in range(0, n, cfg.batch_size):
                idx = torch.from_numpy(order[start:start + cfg.batch_size])
                x = augment_batch(x_all[idx], cfg.augmentation, rng)
                loss = F.cross_entropy(net(x), y_all[idx])
                check_finite(loss, stage_tag, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
                seen += len(idx)
            if sched is not None:
                sched.step()
            recalibrate_bn(out, ds.images)
            record = {"epoch": epoch, "train_loss": total / seen, "lr": opt.param_groups[0]["lr"]}
            if track_subsets:
                record.update(subset_accuracies(out, ds))
            if evaluate is not None:
                record.update(evaluate(out))
            metrics.epochs.append(record)
            log.info("%s epoch %d: %s", stage_tag, epoch, {k: round(v, 4) if isinstance(v, float) else v
                                                        for k, v in record.items()})
    net.eval()
    if evaluate is not None:
        metrics.final = evaluate(out)
    if metrics.epochs and not math.isfinite(metrics.epochs[-1]["train_loss"]):
        raise StageError(f"{stage_tag}: non-finite mean training loss")
    return out, metrics


def per_sample_loss(model: ModelState, images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = predict_logits(model, images).double()
    return F.cross_entropy(logits, torch.from_numpy(np.asarray(labels, np.int64)), reduction="none").numpy()
