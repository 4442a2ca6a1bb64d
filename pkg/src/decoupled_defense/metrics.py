"""Clean accuracy, attack success rate and CSV/plot reporting."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .models import ModelState, predict_logits
from .poisoning import ConfigError, LabeledDataset, TriggerSpec, apply_trigger
from .training import StageMetrics


@dataclass
class EvalReport:
    clean_accuracy: float
    attack_success_rate: float | None
    per_class_accuracy: list[float] = field(default_factory=list)
    n_eval: int = 0
    stage_tag: str = ""

    @property
    def as_percent(self) -> dict:
        asr = None if self.attack_success_rate is None else round(100 * self.attack_success_rate, 2)
        return {"CA": round(100 * self.clean_accuracy, 2), "ASR": asr}

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def predict_labels(model, images) -> np.ndarray:
    """Argmax predictions of a ModelState, or of any callable mapping images to scores."""
    if isinstance(model, ModelState):
        return predict_logits(model, images).argmax(1).numpy()
    return np.asarray(model(images)).argmax(axis=1)


def clean_accuracy(model, test: LabeledDataset) -> float:
    if len(test) == 0:
        raise ConfigError("clean accuracy needs a nonempty test set")
    if test.poison_mask.any():
        raise ConfigError("clean accuracy must be measured on an untampered test set")
    return float((predict_labels(model, test.images) == test.labels).mean())


def per_class_accuracy(model, test: LabeledDataset) -> list[float]:
    pred = predict_labels(model, test.images)
    return [float((pred[test.labels == c] == c).mean()) if (test.labels == c).any() else float("nan")
            for c in range(test.class_count)]


def attack_success_rate(model, clean_test: LabeledDataset, spec: TriggerSpec, target: int,
                        exclude_target: bool = True) -> float:
    """Fraction of triggered test images classified as ``target``."""
    if clean_test.poison_mask.any():
        raise ConfigError("ASR must start from an untampered test set")
    keep = clean_test.labels != target if exclude_target else np.ones(len(clean_test), bool)
    if not keep.any():
        raise ConfigError("no test samples left after excluding the target class")
    triggered = apply_trigger(clean_test.images[keep], spec)
    return float((predict_labels(model, triggered) == target).mean())


def evaluate(model, test: LabeledDataset, spec: TriggerSpec | None, target: int | None,
             stage_tag: str = "") -> EvalReport:
    asr = None
    if spec is not None and target is not None:
        asr = attack_success_rate(model, test, spec, target)
    return EvalReport(clean_accuracy(model, test), asr, per_class_accuracy(model, test), len(test),
                      stage_tag or getattr(model, "stage_tag", ""))


# --- reports --------------------------------------------------------------

REPORT_COLUMNS = ["run", "stage", "CA", "ASR", "n_eval"]
CURVE_COLUMNS = ["run", "stage", "epoch", "train_loss", "clean_subset_acc", "poisoned_subset_acc",
                 "forget_loss", "pseudo_label_acceptance", "CA", "ASR"]
SUBSET_COLUMNS = ["epoch", "clean_subset_acc", "poisoned_subset_acc"]


def _fmt(v, pct=False):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if pct:
        return f"{100 * v:.2f}"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _write_csv(path: Path, columns, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    path.write_text(buf.getvalue())


def write_curves(path, curves, run: str = "run") -> Path:
    """Per-epoch stage records as CSV with the CURVE_COLUMNS schema."""
    rows = [[run, m.stage] + [_fmt(e.get(c)) for c in CURVE_COLUMNS[2:]] for m in curves for e in m.epochs]
    _write_csv(Path(path), CURVE_COLUMNS, rows)
    return Path(path)


def emit_report(reports, curves, out_dir, run: str = "run", plots: bool = False) -> list[Path]:
    """Write ``stage_reports.csv``, ``curves.csv`` and ``subset_accuracy.csv`` to ``out_dir``.

    Accuracies in ``stage_reports.csv`` are percentages with two decimals; curve
    values are fractions. Identical inputs give byte-identical files.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir}: {e}") from e
    written = []

    rows = [[run, r.stage_tag, _fmt(r.clean_accuracy, True), _fmt(r.attack_success_rate, True), r.n_eval]
            for r in reports]
    _write_csv(out_dir / "stage_reports.csv", REPORT_COLUMNS, rows)
    written.append(out_dir / "stage_reports.csv")

    written.append(write_curves(out_dir / "curves.csv", curves, run))

    sl = [m for m in curves if m.stage == "SL"]
    rows = [[e["epoch"], _fmt(e.get("clean_subset_acc")), _fmt(e.get("poisoned_subset_acc"))]
            for m in sl[:1] for e in m.epochs]
    _write_csv(out_dir / "subset_accuracy.csv", SUBSET_COLUMNS, rows)
    written.append(out_dir / "subset_accuracy.csv")

    if plots:
        written += _plots(reports, sl[:1], out_dir)
    return written


def _plots(reports, sl_curves, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    if sl_curves:
        m = sl_curves[0]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(m.column("epoch"), m.column("clean_subset_acc"), marker="o", label="clean subset")
        ax.plot(m.column("epoch"), m.column("poisoned_subset_acc"), marker="s", label="poisoned subset")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train accuracy")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "subset_accuracy.png", dpi=120)
        plt.close(fig)
        paths.append(out_dir / "subset_accuracy.png")
    if reports:
        fig, ax = plt.subplots(figsize=(4, 3))
        xs = np.arange(len(reports))
        ax.bar(xs - 0.2, [r.clean_accuracy for r in reports], 0.4, label="CA")
        ax.bar(xs + 0.2, [r.attack_success_rate or 0 for r in reports], 0.4, label="ASR")
        ax.set_xticks(xs, [r.stage_tag for r in reports])
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "stages.png", dpi=120)
        plt.close(fig)
        paths.append(out_dir / "stages.png")
    return paths


def curves_from_dicts(ds) -> list[StageMetrics]:
    return [StageMetrics.from_dict(d) for d in ds]
