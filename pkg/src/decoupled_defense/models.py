"""Classifier architectures, model state and checkpoints."""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .poisoning import ConfigError

STAGES = ("init", "SL", "AU", "ASSFT")


class SmallCNN(nn.Module):
    def __init__(self, class_count: int, in_channels: int = 3, widths=(32, 64, 128)):
        super().__init__()
        layers = []
        c = in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True),
                       nn.MaxPool2d(2)]
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c, class_count)

    def forward(self, x):
        x = self.features(x)
        return self.head(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


class _WideBasic(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride, bias=False)

    def forward(self, x):
        o = F.relu(self.bn1(x))
        y = self.conv1(o)
        y = self.conv2(F.relu(self.bn2(y)))
        return y + (x if self.shortcut is None else self.shortcut(o))


class WideResNet(nn.Module):
    def __init__(self, depth: int, widen: int, class_count: int, in_channels: int = 3):
        super().__init__()
        assert (depth - 4) % 6 == 0, "depth must be 6k + 4"
        k = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.conv = nn.Conv2d(in_channels, widths[0], 3, 1, 1, bias=False)
        blocks = []
        cin = widths[0]
        for g, stride in zip(range(1, 4), (1, 2, 2)):
            for i in range(k):
                blocks.append(_WideBasic(cin, widths[g], stride if i == 0 else 1))
                cin = widths[g]
        self.blocks = nn.Sequential(*blocks)
        self.bn = nn.BatchNorm2d(cin)
        self.head = nn.Linear(cin, class_count)

    def forward(self, x):
        x = F.relu(self.bn(self.blocks(self.conv(x))))
        return self.head(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


ARCHITECTURES = {
    "small_cnn": lambda c, ch: SmallCNN(c, ch),
    "wideresnet_16_1": lambda c, ch: WideResNet(16, 1, c, ch),
}


@dataclass
class ModelState:
    arch_id: str
    class_count: int
    net: nn.Module
    stage_tag: str = "init"
    seed: int = 0
    in_channels: int = 3

    def clone(self, stage_tag: str | None = None) -> ModelState:
        out = copy.deepcopy(self)
        if stage_tag is not None:
            out.stage_tag = stage_tag
        return out

    def weights(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "arch_id": self.arch_id,
            "class_count": self.class_count,
            "in_channels": self.in_channels,
            "stage_tag": self.stage_tag,
            "seed": self.seed,
            "state_dict": self.net.state_dict(),
        }, path)

    @classmethod
    def load(cls, path) -> ModelState:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        state = build_model(blob["arch_id"], blob["class_count"], blob["seed"], blob["in_channels"])
        state.net.load_state_dict(blob["state_dict"])
        state.stage_tag = blob["stage_tag"]
        return state


def build_model(arch_id: str, class_count: int, seed: int, in_channels: int = 3) -> ModelState:
    if arch_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch_id!r}; choose from {sorted(ARCHITECTURES)}")
    if class_count < 2:
        raise ConfigError("class_count must be at least 2")
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = ARCHITECTURES[arch_id](class_count, in_channels)
    return ModelState(arch_id, class_count, net, "init", seed, in_channels)


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(n, H, W, C) numpy -> (n, C, H, W) float tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.asarray(images, np.float32).transpose(0, 3, 1, 2)))


@torch.no_grad()
def predict_logits(model: ModelState, images: np.ndarray, batch_size: int = 500) -> torch.Tensor:
    images = np.asarray(images, np.float32)
    if images.ndim != 4 or images.shape[-1] != model.in_channels:
        raise ConfigError(f"expected (n, H, W, {model.in_channels}) images, got {images.shape}")
    net = model.net
    was_training = net.training
    net.eval()
    try:
        out = [net(to_tensor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)]
    finally:
        net.train(was_training)
    if not out:
        return torch.zeros(0, model.class_count)
    return torch.cat(out)


def predict_log_proba(model: ModelState, images: np.ndarray) -> np.ndarray:
    # float64 keeps resolution for near-one-hot predictions
    return torch.log_softmax(predict_logits(model, images).double(), dim=1).numpy()


def predict_proba(model: ModelState, images: np.ndarray) -> np.ndarray:
    return np.exp(predict_log_proba(model, images))


@torch.no_grad()
def recalibrate_bn(model: ModelState, images: np.ndarray, batch_size: int = 250) -> None:
    """Re-estimate BatchNorm running statistics as exact averages over ``images``.

    The default EMA lags far behind the weights when an epoch is only a few dozen
    steps, which makes eval-mode predictions erratic.
    """
    bns = [m for m in model.net.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]
    if not bns or len(images) == 0:
        return
    saved = [m.momentum for m in bns]
    for m in bns:
        m.reset_running_stats()
        m.momentum = None
    was_training = model.net.training
    model.net.train()
    try:
        for i in range(0, len(images), batch_size):
            model.net(to_tensor(images[i:i + batch_size]))
    finally:
        for m, mom in zip(bns, saved):
            m.momentum = mom
        model.net.train(was_training)
