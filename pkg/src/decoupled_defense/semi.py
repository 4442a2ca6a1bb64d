"""Stage ASSFT: FixMatch-style fine-tuning with the filtered clean subset as the labeled set."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .augment import augment_batch
from .models import ModelState, recalibrate_bn, to_tensor
from .poisoning import ConfigError, LabeledDataset
from .training import EvalHook, StageMetrics, check_finite

log = logging.getLogger(__name__)


@dataclass
class SSLConfig:
    epochs: int = 30
    lambda_u: float = 1.0
    beta_reg: float = 5e-4
    confidence_tau: float = 0.95
    unlabeled_ratio: int = 7
    learning_rate: float = 0.01
    momentum: float = 0.9
    # labeled examples per step; each step also draws unlabeled_ratio * batch_size unlabeled ones
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.lambda_u < 0 or self.beta_reg < 0:
            raise ConfigError("lambda_u and beta_reg must be >= 0")
        if not 0 < self.confidence_tau < 1:
            raise ConfigError("confidence_tau must lie in (0, 1)")
        if self.unlabeled_ratio < 1 or self.batch_size < 1:
            raise ConfigError("unlabeled_ratio and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class SemiDataset:
    labeled_images: np.ndarray
    labels: np.ndarray
    unlabeled_images: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    class_count: int


def strip_labels(ds: LabeledDataset, clean_idx) -> SemiDataset:
    clean_idx = np.unique(np.asarray(clean_idx, dtype=np.int64))
    n = len(ds)
    if len(clean_idx) and (clean_idx[0] < 0 or clean_idx[-1] >= n):
        raise ConfigError(f"labeled indices must lie in [0, {n})")
    rest = np.setdiff1d(np.arange(n), clean_idx)
    return SemiDataset(ds.images[clean_idx], ds.labels[clean_idx], ds.images[rest],
                       clean_idx, rest, ds.class_count)


def fixmatch_loss(logits_x: torch.Tensor, y: torch.Tensor, logits_weak: torch.Tensor,
                  logits_strong: torch.Tensor, tau: float, lambda_u: float):
    """Supervised CE + lambda_u * confidence-masked CE against weak-view pseudo-labels.

    The weak-view logits only produce targets; no gradient reaches them.
    Returns (loss, supervised part, unlabeled part, acceptance mask).
    """
    sup = F.cross_entropy(logits_x, y)
    q = torch.softmax(logits_weak.detach(), dim=1)
    conf, pseudo = q.max(dim=1)
    mask = (conf >= tau).float()
    if len(mask):
        unsup = (F.cross_entropy(logits_strong, pseudo, reduction="none") * mask).mean()
    else:
        unsup = logits_strong.sum() * 0.0
    return sup + lambda_u * unsup, sup, unsup, mask


def l2_penalty(net) -> torch.Tensor:
    return 0.5 * sum((p ** 2).sum() for p in net.parameters())


def ssl_train(model: ModelState, semi: SemiDataset, cfg: SSLConfig,
              evaluate: EvalHook | None = None) -> tuple[ModelState, StageMetrics]:
    n_l, n_u = len(semi.labels), len(semi.unlabeled_images)
    if n_l == 0:
        raise ConfigError("semi-supervised fine-tuning needs a nonempty labeled set")
    if model.stage_tag not in ("AU", "SL"):
        raise ConfigError(f"fine-tuning expects a model after AU (or SL), got {model.stage_tag!r}")
    if model.class_count != semi.class_count:
        raise ConfigError("class count mismatch between model and dataset")

    out = model.clone(stage_tag="ASSFT")
    net = out.net
    opt = torch.optim.SGD(net.parameters(), lr=cfg.learning_rate, momentum=cfg.momentum)
    rng = np.random.default_rng(cfg.seed)
    xl, yl = to_tensor(semi.labeled_images), torch.from_numpy(semi.labels)
    xu = to_tensor(semi.unlabeled_images)
    mu_b = cfg.unlabeled_ratio * cfg.batch_size
    steps = max(1, math.ceil(n_u / mu_b)) if n_u else max(1, math.ceil(n_l / cfg.batch_size))
    metrics = StageMetrics("ASSFT")
    # with lambda_u = 0 the unlabeled pool takes no part at all
    use_unlabeled = n_u > 0 and cfg.lambda_u > 0
    bn_images = np.concatenate([semi.labeled_images, semi.unlabeled_images]) if use_unlabeled \
        else semi.labeled_images

    l_order, l_pos = rng.permutation(n_l), 0
    u_order, u_pos = rng.permutation(n_u), 0

    def draw(order, pos, size, n):
        # cycle with reshuffles so small labeled sets fill a whole batch
        idx = []
        while len(idx) < size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(size - len(idx), n - pos)
            idx.extend(order[pos:pos + take])
            pos += take
        return np.asarray(idx), order, pos

    for epoch in range(1, cfg.epochs + 1):
        net.train()
        tot = {"loss": 0.0, "sup": 0.0, "unsup": 0.0}
        accepted, offered = 0.0, 0
        for _ in range(steps):
            li, l_order, l_pos = draw(l_order, l_pos, cfg.batch_size, n_l)
            parts = [augment_batch(xl[li], "weak", rng)]
            if use_unlabeled:
                ui, u_order, u_pos = draw(u_order, u_pos, mu_b, n_u)
                ub = xu[ui]
                parts += [augment_batch(ub, "weak", rng), augment_batch(ub, "strong", rng)]
            logits = net(torch.cat(parts))
            logits_x = logits[: len(li)]
            if len(parts) == 3:
                logits_w, logits_s = logits[len(li):].chunk(2)
            else:
                logits_w = logits_s = logits[:0]
            loss, sup, unsup, mask = fixmatch_loss(logits_x, yl[li], logits_w, logits_s,
                                                   cfg.confidence_tau, cfg.lambda_u)
            if cfg.beta_reg:
                loss = loss + cfg.beta_reg * l2_penalty(net)
            check_finite(loss, "ASSFT", epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot["loss"] += loss.item()
            tot["sup"] += sup.item()
            tot["unsup"] += unsup.item()
            accepted += mask.sum().item()
            offered += len(mask)
        record = {"epoch": epoch, **{k: v / steps for k, v in tot.items()},
                  "pseudo_label_acceptance": accepted / offered if offered else 0.0}
        recalibrate_bn(out, bn_images)
        net.eval()
        if evaluate is not None:
            record.update(evaluate(out))
        metrics.epochs.append(record)
        log.info("ASSFT epoch %d: %s", epoch, record)
    net.eval()
    if evaluate is not None:
        metrics.final = evaluate(out)
    return out, metrics


def acceptance_rate(logits_weak: torch.Tensor, tau: float) -> float:
    conf = torch.softmax(logits_weak.detach(), dim=1).max(dim=1).values
    return float((conf >= tau).float().mean()) if len(conf) else 0.0
