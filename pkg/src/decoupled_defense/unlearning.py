"""Stage AU: gradient ascent on the supervised loss over the filtered poisoned subset."""
from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .models import ModelState, predict_logits, recalibrate_bn, to_tensor
from .poisoning import ConfigError, LabeledDataset
from .training import EvalHook, StageError, StageMetrics

log = logging.getLogger(__name__)


@dataclass
class UnlearnConfig:
    epochs: int = 20
    learning_rate: float = 0.01
    momentum: float = 0.0
    # nats; ascent pauses while the forget-set loss is above this. None disables it
    loss_clamp: float | None = 15.0
    batch_size: int = 128
    seed: int = 0
    # "batch": ascend with forget-batch statistics, then re-estimate the running
    # statistics on the whole training set; "frozen": eval-mode forward throughout
    bn_mode: str = "batch"

    def __post_init__(self):
        if self.bn_mode not in ("batch", "frozen"):
            raise ConfigError(f"bn_mode must be 'batch' or 'frozen', got {self.bn_mode!r}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


def ascent_step(net: nn.Module, opt: torch.optim.Optimizer, x: torch.Tensor, y: torch.Tensor,
                loss_fn=F.cross_entropy) -> float:
    """One step that increases ``loss_fn(net(x), y)``; returns the pre-step loss."""
    loss = loss_fn(net(x), y)
    opt.zero_grad()
    (-loss).backward()
    opt.step()
    return loss.item()


def mean_loss(model: ModelState, images, labels) -> float:
    logits = predict_logits(model, images).double()
    return F.cross_entropy(logits, torch.from_numpy(np.asarray(labels, np.int64))).item()


@contextmanager
def forward_mode(net: nn.Module, bn_mode: str):
    """Put ``net`` in the normalisation mode used for ascent; restores BN momenta on exit."""
    bns = [m for m in net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in bns]
    if bn_mode == "batch":
        net.train()
        for m in bns:
            m.momentum = 0.0
    else:
        net.eval()
    try:
        yield
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        net.eval()


def active_unlearn(model: ModelState, ds: LabeledDataset, p_idx, cfg: UnlearnConfig,
                   evaluate: EvalHook | None = None) -> tuple[ModelState, StageMetrics]:
    p_idx = np.asarray(p_idx, dtype=np.int64)
    if len(p_idx) == 0:
        raise ConfigError("active unlearning needs a nonempty filtered poisoned subset")
    if model.stage_tag not in ("SL", "ASSFT"):
        raise ConfigError(f"active unlearning expects a model after SL (or ASSFT), got {model.stage_tag!r}")

    out = model.clone(stage_tag="AU")
    net = out.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    images, labels = ds.images[p_idx], ds.labels[p_idx]
    x_all, y_all = to_tensor(images), torch.from_numpy(labels)
    rng = np.random.default_rng(cfg.seed)
    metrics = StageMetrics("AU")

    def forget_loss():
        return mean_loss(out, images, labels)

    start_loss = forget_loss()
    loss = start_loss
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(p_idx))
        steps, last = 0, None
        # the clamp looks at the loss of the model as it is evaluated, once per epoch
        if cfg.loss_clamp is None or loss <= cfg.loss_clamp:
            with forward_mode(net, cfg.bn_mode):
                for s in range(0, len(order), cfg.batch_size):
                    idx = torch.from_numpy(order[s:s + cfg.batch_size])
                    last = ascent_step(net, opt, x_all[idx], y_all[idx])
                    if not np.isfinite(last):
                        raise StageError(f"AU: non-finite loss ({last}) at epoch {epoch}")
                    steps += 1
            if cfg.bn_mode == "batch":
                recalibrate_bn(out, ds.images)
        loss = forget_loss()
        if not np.isfinite(loss):
            raise StageError(f"AU: non-finite loss on the forget set at epoch {epoch}")
        record = {"epoch": epoch, "forget_loss": loss, "batch_loss": last, "steps": steps}
        if evaluate is not None:
            record.update(evaluate(out))
        metrics.epochs.append(record)
        log.info("AU epoch %d: %s", epoch, record)
    metrics.final = {"forget_loss_start": start_loss}
    if evaluate is not None:
        metrics.final.update(evaluate(out))
    return out, metrics
