"""End-to-end runs: configuration, stage orchestration, manifests, resume and sweeps."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__, audit
from .augment import STRONG_AUG_DESCRIPTION
from .datasets import load_cifar10, make_shapes_split
from .filtering import FilterResult, filter_precision, filter_split, loss_filter_split
from .metrics import EvalReport, emit_report, evaluate
from .models import ModelState, build_model
from .poisoning import (CLEAN_LABEL, POISON_LABEL, ConfigError, LabeledDataset, PoisonConfig, TriggerSpec,
                        poison_dataset)
from .semi import SSLConfig, ssl_train, strip_labels
from .training import StageError, StageMetrics, TrainConfig, supervised_train
from .unlearning import UnlearnConfig, active_unlearn

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "run-manifest/1"
MANIFEST_NAME = "manifest.json"

STAGE_ORDERS = {
    "SL_FILTER_AU_ASSFT": ("SL", "FILTER", "AU", "ASSFT"),
    "SL_AU": ("SL", "FILTER", "AU"),
    "SL_ASSFT": ("SL", "FILTER", "ASSFT"),
    "SL_ASSFT_AU": ("SL", "FILTER", "ASSFT", "AU"),
    "SL_ONLY": ("SL",),
}
MODEL_STAGES = ("SL", "AU", "ASSFT")
ATTACKS = ("badnets", "blended", "sig", "none")


def stage_seed(global_seed: int, stage: str) -> int:
    """Per-stage seed; adding or reordering stages never changes another stage's seed."""
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


# --- configuration ----------------------------------------------------------

@dataclass
class DataConfig:
    # "shapes" (procedural), "dir" (train/ and test/ saved LabeledDataset dirs) or "cifar10"
    source: str = "shapes"
    path: str | None = None
    n_train: int = 5000
    n_test: int = 2000
    image_size: int = 16
    difficulty: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.source not in ("shapes", "dir", "cifar10"):
            raise ConfigError(f"data.source must be shapes, dir or cifar10, got {self.source!r}")
        if self.source != "shapes" and not self.path:
            raise ConfigError(f"data.source={self.source!r} needs data.path")
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1")


@dataclass
class AttackConfig:
    name: str = "badnets"
    rate_alpha: float = 0.1
    target_class: int = 0
    # None picks the attack's own mode: clean-label for sig, poison-label otherwise
    label_mode: str | None = None

    def __post_init__(self):
        if self.name not in ATTACKS:
            raise ConfigError(f"attack.name must be one of {ATTACKS}, got {self.name!r}")
        if self.label_mode not in (None, POISON_LABEL, CLEAN_LABEL):
            raise ConfigError(f"attack.label_mode must be {POISON_LABEL!r} or {CLEAN_LABEL!r}")
        if not 0.0 <= self.rate_alpha <= 1.0:
            raise ConfigError(f"attack.rate_alpha must be in [0, 1], got {self.rate_alpha}")

    @property
    def mode(self) -> str:
        if self.label_mode is not None:
            return self.label_mode
        return CLEAN_LABEL if self.name == "sig" else POISON_LABEL


def _default_ssl():
    return SSLConfig()


@dataclass
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    arch_id: str = "small_cnn"
    sl: TrainConfig = field(default_factory=TrainConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    ssl: SSLConfig = field(default_factory=_default_ssl)
    gamma: float = 0.01
    filter_method: str = "entropy"
    stage_order: str = "SL_FILTER_AU_ASSFT"
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.stage_order not in STAGE_ORDERS:
            raise ConfigError(f"stage_order must be one of {sorted(STAGE_ORDERS)}, got {self.stage_order!r}")
        if self.filter_method not in ("entropy", "loss"):
            raise ConfigError(f"filter_method must be entropy or loss, got {self.filter_method!r}")
        if not 0 < self.gamma <= 0.5:
            raise ConfigError(f"gamma must be in (0, 0.5], got {self.gamma}")

    @property
    def stages(self) -> tuple[str, ...]:
        return STAGE_ORDERS[self.stage_order]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> PipelineConfig:
        if not isinstance(d, dict):
            raise ConfigError("pipeline config must be a JSON object")
        nested = {"data": DataConfig, "attack": AttackConfig, "sl": TrainConfig,
                  "unlearn": UnlearnConfig, "ssl": SSLConfig}
        kwargs = {}
        for k, v in d.items():
            if k not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key {k!r}")
            kwargs[k] = _build(nested[k], v, k) if k in nested else v
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> PipelineConfig:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
        return cls.from_dict(d)

    def replace(self, **changes) -> PipelineConfig:
        d = self.to_dict()
        for key, value in changes.items():
            node = d
            *parents, leaf = key.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return PipelineConfig.from_dict(d)


def _build(kind, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix} must be a JSON object")
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {prefix}: {unknown}")
    try:
        return kind(**d)
    except TypeError as e:
        raise ConfigError(f"{prefix}: {e}") from e


def fingerprint(cfg: PipelineConfig) -> str:
    """Hash of everything that determines stage results (not the stage order or output dir)."""
    d = cfg.to_dict()
    d.pop("out_dir")
    d.pop("stage_order")
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


# --- data -------------------------------------------------------------------

def load_data(cfg: DataConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(clean train, clean test) for a data config."""
    if cfg.source == "shapes":
        return make_shapes_split(cfg.n_train, cfg.n_test, cfg.seed, cfg.image_size, cfg.difficulty)
    try:
        if cfg.source == "dir":
            return LabeledDataset.load(Path(cfg.path) / "train"), LabeledDataset.load(Path(cfg.path) / "test")
        return (load_cifar10(cfg.path, True, cfg.n_train, cfg.seed),
                load_cifar10(cfg.path, False, cfg.n_test, cfg.seed))
    except (OSError, KeyError, ValueError) as e:
        raise OSError(f"cannot read dataset at {cfg.path}: {e}") from e


def trigger_for(cfg: PipelineConfig, image_shape) -> TriggerSpec | None:
    if cfg.attack.name == "none":
        return None
    return TriggerSpec.for_attack(cfg.attack.name, image_shape)


def build_poisoned(cfg: PipelineConfig, train: LabeledDataset):
    spec = trigger_for(cfg, train.image_shape)
    if spec is None or cfg.attack.rate_alpha == 0:
        return train, spec
    pcfg = PoisonConfig(cfg.attack.rate_alpha, cfg.attack.target_class, cfg.attack.mode,
                        seed=stage_seed(cfg.seed, "POISON"))
    return poison_dataset(train, pcfg, spec), spec


def dataset_digest(ds: LabeledDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.images).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    return h.hexdigest()[:16]


# --- manifest ---------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    seed: int
    status: str = "complete"
    checkpoint: str | None = None
    report: dict | None = None
    metrics: dict | None = None
    filter: dict | None = None
    wall_clock_s: float = 0.0
    reused_from: str | None = None


@dataclass
class RunManifest:
    config: dict
    fingerprint: str
    status: str = "running"
    stages: list[StageRecord] = field(default_factory=list)
    failure: dict | None = None
    dataset: dict = field(default_factory=dict)
    strong_augmentation: dict = field(default_factory=lambda: dict(STRONG_AUG_DESCRIPTION))
    version: str = __version__
    schema: str = MANIFEST_SCHEMA

    def stage(self, name) -> StageRecord:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def reports(self) -> list[EvalReport]:
        return [EvalReport.from_dict(s.report) for s in self.stages if s.report is not None]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunManifest:
        if d.get("schema") != MANIFEST_SCHEMA:
            raise ConfigError(f"unsupported manifest schema {d.get('schema')!r}")
        d = dict(d)
        d["stages"] = [StageRecord(**s) for s in d.get("stages", [])]
        return cls(**d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        """Atomic write: temp file in the same directory, then rename."""
        path = Path(path)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".manifest-", suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(self.dumps())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> RunManifest:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise OSError(f"cannot read manifest {path}: {e}") from e
        return cls.from_dict(json.loads(text))


def strip_wall_clock(d: dict) -> dict:
    d = json.loads(json.dumps(d))
    for s in d.get("stages", []):
        s.pop("wall_clock_s", None)
    return d


# --- running ----------------------------------------------------------------

class _Run:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.train, self.test = load_data(cfg.data)
        self.poisoned, self.spec = build_poisoned(cfg, self.train)
        self.model: ModelState | None = None
        self.filter: FilterResult | None = None
        self.curves: list[StageMetrics] = []

    def evaluate(self, model: ModelState) -> dict:
        with audit.instrumentation():
            r = evaluate(model, self.test, self.spec, self.cfg.attack.target_class if self.spec else None)
        return {"CA": r.clean_accuracy, "ASR": r.attack_success_rate}

    def report(self, model: ModelState, tag: str) -> dict:
        with audit.instrumentation():
            r = evaluate(model, self.test, self.spec, self.cfg.attack.target_class if self.spec else None, tag)
        return r.to_dict()

    def run_stage(self, name: str, index: int) -> StageRecord:
        cfg, seed = self.cfg, stage_seed(self.cfg.seed, name)
        rec = StageRecord(name, seed)
        t0 = time.perf_counter()
        with audit.defense_path():
            if name == "SL":
                init = build_model(cfg.arch_id, self.poisoned.class_count, stage_seed(cfg.seed, "INIT"),
                                   self.poisoned.image_shape[2])
                self.model, m = supervised_train(init, self.poisoned, dataclasses.replace(cfg.sl, seed=seed),
                                                 evaluate=self.evaluate)
            elif name == "FILTER":
                split = filter_split if cfg.filter_method == "entropy" else loss_filter_split
                self.filter, m = split(self.model, self.poisoned, cfg.gamma), None
            elif name == "AU":
                self.model, m = active_unlearn(self.model, self.poisoned, self.filter.poisoned_idx,
                                               dataclasses.replace(cfg.unlearn, seed=seed), evaluate=self.evaluate)
            elif name == "ASSFT":
                semi = strip_labels(self.poisoned, self.filter.clean_idx)
                self.model, m = ssl_train(self.model, semi, dataclasses.replace(cfg.ssl, seed=seed),
                                          evaluate=self.evaluate)
            else:
                raise ConfigError(f"unknown stage {name!r}")
        rec.wall_clock_s = round(time.perf_counter() - t0, 3)

        if name == "FILTER":
            path = self.out / "filter.json"
            self.filter.save(path)
            rec.checkpoint = path.name
            rec.filter = self.filter.summary()
            with audit.instrumentation():
                if self.poisoned.poison_mask.any():
                    rec.filter["precision_p"], rec.filter["purity_c"] = filter_precision(self.filter, self.poisoned)
        else:
            path = self.out / "checkpoints" / f"{index}_{name}.pt"
            self.model.save(path)
            rec.checkpoint = str(path.relative_to(self.out))
            rec.report = self.report(self.model, name)
            rec.metrics = m.to_dict()
            self.curves.append(m)
        return rec

    def restore(self, rec: StageRecord, src_dir: Path) -> None:
        path = src_dir / rec.checkpoint
        if rec.name == "FILTER":
            self.filter = FilterResult.load(path)
        else:
            self.model = ModelState.load(path)
            self.curves.append(StageMetrics.from_dict(rec.metrics))


def run_pipeline(cfg: PipelineConfig, resume: bool = False, reuse_from=None) -> RunManifest:
    """Run ``cfg.stage_order`` and write ``manifest.json`` plus reports into ``cfg.out_dir``.

    ``resume`` continues from the manifest already in ``out_dir``; ``reuse_from`` copies
    the longest matching prefix of completed stages from another run directory whose
    config differs at most in stage order and output location.
    """
    out = Path(cfg.out_dir)
    try:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    run = _Run(cfg)
    fp = fingerprint(cfg)
    manifest = RunManifest(config=cfg.to_dict(), fingerprint=fp,
                           dataset={"train": dataset_digest(run.poisoned), "test": dataset_digest(run.test),
                                    "n_train": len(run.poisoned), "n_test": len(run.test)})

    previous, src_dir = None, None
    if resume and (out / MANIFEST_NAME).exists():
        previous, src_dir = RunManifest.load(out / MANIFEST_NAME), out
    elif reuse_from is not None:
        previous, src_dir = RunManifest.load(Path(reuse_from) / MANIFEST_NAME), Path(reuse_from)
    if previous is not None and previous.fingerprint != fp:
        raise ConfigError(f"cannot reuse run in {src_dir}: configuration differs")

    stages = cfg.stages
    done = 0
    if previous is not None:
        for i, name in enumerate(stages):
            if i >= len(previous.stages):
                break
            rec = previous.stages[i]
            if rec.name != name or rec.status != "complete":
                break
            run.restore(rec, src_dir)
            rec = dataclasses.replace(rec)
            if src_dir != out:
                dst = out / rec.checkpoint
                dst.parent.mkdir(parents=True, exist_ok=True)
                shutil.copyfile(src_dir / rec.checkpoint, dst)
                rec.reused_from = str(src_dir)
            manifest.stages.append(rec)
            done += 1
    manifest.save(out / MANIFEST_NAME)

    for i in range(done, len(stages)):
        name = stages[i]
        log.info("stage %s (%d/%d)", name, i + 1, len(stages))
        try:
            rec = run.run_stage(name, i)
        except (StageError, ConfigError) as e:
            manifest.status = "failed"
            manifest.failure = {"stage": name, "error": type(e).__name__, "message": str(e)}
            manifest.stages.append(StageRecord(name, stage_seed(cfg.seed, name), status="failed"))
            manifest.save(out / MANIFEST_NAME)
            raise StageError(f"stage {name} failed: {e}") from e
        manifest.stages.append(rec)
        manifest.save(out / MANIFEST_NAME)

    manifest.status = "complete"
    manifest.save(out / MANIFEST_NAME)
    emit_report(manifest.reports(), run.curves, out, run=out.name)
    return manifest


# --- sweeps -----------------------------------------------------------------

SWEEP_AXES = {"poison_rate": "attack.rate_alpha", "rate": "attack.rate_alpha",
              "filter_rate": "gamma", "gamma": "gamma"}
SWEEP_COLUMNS = ["axis", "value", "status", "stage", "CA", "ASR", "filter_precision"]


def sweep(template: PipelineConfig, axis: str, values, out_dir=None, resume: bool = False) -> list:
    """One pipeline per value; failures are recorded and the remaining runs continue.

    Returns a list holding a RunManifest per successful run and the exception otherwise,
    and writes ``comparison.csv`` (percent, two decimals) in ``out_dir``.
    """
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {sorted(SWEEP_AXES)}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    key = SWEEP_AXES[axis]
    base = Path(out_dir or template.out_dir)
    configs = [template.replace(**{key: float(v), "out_dir": str(base / f"{key.split('.')[-1]}={v}")})
               for v in values]

    results, rows = [], []
    for v, cfg in zip(values, configs):
        try:
            m = run_pipeline(cfg, resume=resume)
        except (StageError, ConfigError, OSError) as e:
            log.error("sweep run %s=%s failed: %s", key, v, e)
            results.append(e)
            rows.append([key, v, "failed", "", "", "", ""])
            continue
        results.append(m)
        prec = ""
        if any(s.name == "FILTER" for s in m.stages):
            p = m.stage("FILTER").filter.get("precision_p")
            prec = "" if p is None else f"{p:.4f}"
        for r in m.reports():
            asr = "" if r.attack_success_rate is None else f"{100 * r.attack_success_rate:.2f}"
            rows.append([key, v, m.status, r.stage_tag, f"{100 * r.clean_accuracy:.2f}", asr, prec])
    base.mkdir(parents=True, exist_ok=True)
    with open(base / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        w.writerows(rows)
    return results
