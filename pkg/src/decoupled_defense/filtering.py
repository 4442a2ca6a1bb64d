"""Prediction-entropy sample filtering and the training-loss (TLM) baseline.

Samples are ranked ascending by score (entropy or per-sample loss). The
``round(n * gamma)`` lowest-scoring samples form the filtered poisoned subset;
the filtered clean subset takes the highest-scoring samples of each given
label, split as evenly as possible across classes so that it also holds
``round(n * gamma)`` samples.

Clean-side candidates are restricted to the upper half of the ranking (the
complement of the poisoned side at the largest admissible gamma, 0.5). That
keeps the two subsets disjoint and makes both grow monotonically with gamma.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import ModelState, predict_log_proba
from .poisoning import ConfigError, LabeledDataset, round_half_up

MAX_GAMMA = 0.5


def entropy(prob) -> float:
    """Shannon entropy in bits, with 0 * log2(0) = 0."""
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-5:
        raise ValueError("entropy expects a nonnegative vector summing to 1")
    nz = p[p > 0]
    return float(-(nz * np.log2(nz)).sum())


def entropies_from_log_proba(log_p: np.ndarray) -> np.ndarray:
    p = np.exp(log_p)
    h = -np.where(p > 0, p * log_p, 0.0).sum(axis=1) / np.log(2)
    return np.maximum(h, 0.0)


@dataclass
class FilterResult:
    scores: np.ndarray
    poisoned_idx: np.ndarray
    clean_idx: np.ndarray
    gamma: float
    method: str

    @property
    def entropies(self) -> np.ndarray:
        if self.method != "entropy":
            raise AttributeError("scores are per-sample losses, not entropies")
        return self.scores

    def summary(self) -> dict:
        return {"method": self.method, "gamma": self.gamma,
                "n_poisoned": int(len(self.poisoned_idx)), "n_clean": int(len(self.clean_idx))}

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "gamma": self.gamma,
            "scores": self.scores.tolist(),
            "poisoned_idx": self.poisoned_idx.tolist(),
            "clean_idx": self.clean_idx.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FilterResult:
        return cls(np.asarray(d["scores"], np.float64), np.asarray(d["poisoned_idx"], np.int64),
                   np.asarray(d["clean_idx"], np.int64), float(d["gamma"]), d["method"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> FilterResult:
        return cls.from_dict(json.loads(Path(path).read_text()))


def class_quotas(k: int, class_count: int) -> np.ndarray:
    # remainder goes to the lowest class ids, which keeps quotas monotone in k
    q = np.full(class_count, k // class_count, dtype=np.int64)
    q[: k % class_count] += 1
    return q


def split_by_scores(scores: np.ndarray, labels: np.ndarray, class_count: int, gamma: float,
                    method: str = "entropy") -> FilterResult:
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels, np.int64)
    n = len(scores)
    if not 0 < gamma <= MAX_GAMMA:
        raise ConfigError(f"filtering rate gamma must be in (0, {MAX_GAMMA}], got {gamma}")
    k = round_half_up(n * gamma)
    if k < class_count:
        raise ConfigError(f"round(n * gamma) = {k} is smaller than the class count {class_count}")

    # ascending score, ties by ascending index
    order = np.lexsort((np.arange(n), scores))
    poisoned = order[:k]

    upper = order[round_half_up(n * MAX_GAMMA):]
    quotas = class_quotas(k, class_count)
    clean = []
    for c in range(class_count):
        cand = upper[labels[upper] == c]
        if len(cand) < quotas[c]:
            raise ConfigError(f"class {c} has {len(cand)} candidate samples, needs {quotas[c]}")
        # descending score, ties by ascending index
        cand = cand[np.lexsort((cand, -scores[cand]))]
        clean.append(cand[: quotas[c]])
    clean = np.sort(np.concatenate(clean))
    return FilterResult(scores, poisoned, clean, gamma, method)


def filter_split(model: ModelState, ds: LabeledDataset, gamma: float) -> FilterResult:
    _check(model, ds)
    h = entropies_from_log_proba(predict_log_proba(model, ds.images))
    return split_by_scores(h, ds.labels, ds.class_count, gamma, "entropy")


def loss_filter_split(model: ModelState, ds: LabeledDataset, gamma: float) -> FilterResult:
    _check(model, ds)
    log_p = predict_log_proba(model, ds.images)
    losses = -log_p[np.arange(len(ds)), ds.labels]
    return split_by_scores(losses, ds.labels, ds.class_count, gamma, "loss")


def _check(model, ds):
    if model.class_count != ds.class_count:
        raise ConfigError(f"model has {model.class_count} classes, dataset has {ds.class_count}")


def filter_precision(result: FilterResult, ds: LabeledDataset) -> tuple[float, float]:
    """(fraction of the poisoned side truly poisoned, fraction of the clean side truly clean).

    Evaluation only: reads the ground-truth mask.
    """
    mask = ds.poison_mask
    p = float(mask[result.poisoned_idx].mean()) if len(result.poisoned_idx) else float("nan")
    c = float((~mask[result.clean_idx]).mean()) if len(result.clean_idx) else float("nan")
    return p, c
