import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decoupled_defense.metrics import (CURVE_COLUMNS, REPORT_COLUMNS, SUBSET_COLUMNS, EvalReport,
                                       attack_success_rate, clean_accuracy, emit_report, evaluate,
                                       predict_labels)
from decoupled_defense.models import build_model
from decoupled_defense.poisoning import ConfigError, LabeledDataset, PoisonConfig, TriggerSpec, poison_dataset
from decoupled_defense.training import StageMetrics

from conftest import random_dataset

SPEC = TriggerSpec.badnets()


class Lookup:
    """Scores images by looking up their label in a table keyed by the image bytes."""

    def __init__(self, ds: LabeledDataset):
        self.table = {im.tobytes(): y for im, y in zip(ds.images, ds.labels)}
        self.k = ds.class_count

    def __call__(self, images):
        return np.eye(self.k)[[self.table.get(im.tobytes(), 0) for im in images]]


def constant(cls, k=10):
    return lambda images: np.tile(np.eye(k)[cls], (len(images), 1))


def test_truth_oracle_has_full_accuracy():
    ds = random_dataset(100)
    assert clean_accuracy(Lookup(ds), ds) == 1.0


def test_constant_model_scores_class_prior():
    assert clean_accuracy(constant(3), random_dataset(100)) == pytest.approx(0.1)


def test_identical_weights_identical_accuracy():
    ds = random_dataset(50)
    assert clean_accuracy(build_model("small_cnn", 10, 2), ds) == clean_accuracy(build_model("small_cnn", 10, 2), ds)


def test_asr_anchors():
    ds = random_dataset(100)
    assert attack_success_rate(constant(4), ds, SPEC, 4) == 1.0
    assert attack_success_rate(constant(5), ds, SPEC, 4) == 0.0


def test_asr_excludes_target_class():
    ds = random_dataset(100)
    # a model that labels triggered images by their true class: only target-class
    # images would count, and those are excluded
    assert attack_success_rate(Lookup(ds), ds, SPEC, 2) == 0.0
    assert attack_success_rate(constant(2), ds, SPEC, 2, exclude_target=False) == 1.0
    only_target = LabeledDataset(ds.images[:5], np.full(5, 2), 10)
    with pytest.raises(ConfigError):
        attack_success_rate(constant(2), only_target, SPEC, 2)


def test_metrics_refuse_tampered_test_set():
    bad = poison_dataset(random_dataset(50), PoisonConfig(0.1, 0), SPEC)
    with pytest.raises(ConfigError):
        clean_accuracy(constant(0), bad)
    with pytest.raises(ConfigError):
        attack_success_rate(constant(0), bad, SPEC, 0)
    with pytest.raises(ConfigError):
        clean_accuracy(constant(0), random_dataset(0))


@given(st.permutations(list(range(60))), st.integers(0, 9))
def test_asr_invariant_to_test_order(perm, target):
    ds = random_dataset(60)
    model = build_model("small_cnn", 10, 0)
    shuffled = ds.subset(perm)
    assert attack_success_rate(model, ds, SPEC, target) == attack_success_rate(model, shuffled, SPEC, target)


def test_accuracy_complements_error_rate():
    ds = random_dataset(77)
    model = build_model("small_cnn", 10, 1)
    r = evaluate(model, ds, SPEC, 0, "SL")
    wrong = float((predict_labels(model, ds.images) != ds.labels).mean())
    assert r.clean_accuracy + wrong == pytest.approx(1.0, abs=1e-12)
    assert 0 <= r.clean_accuracy <= 1 and 0 <= r.attack_success_rate <= 1
    assert r.n_eval == 77 and r.stage_tag == "SL" and len(r.per_class_accuracy) == 10
    counts = np.bincount(ds.labels, minlength=10)
    assert np.dot(r.per_class_accuracy, counts) / counts.sum() == pytest.approx(r.clean_accuracy)


def read(path):
    with open(path) as f:
        return list(csv.reader(f))


def test_empty_report_has_header_only(tmp_path):
    emit_report([], [], tmp_path)
    assert read(tmp_path / "stage_reports.csv") == [REPORT_COLUMNS]
    assert read(tmp_path / "curves.csv") == [CURVE_COLUMNS]
    assert read(tmp_path / "subset_accuracy.csv") == [SUBSET_COLUMNS]


def test_one_report_one_row(tmp_path):
    emit_report([EvalReport(0.9123, 0.0008, [0.9] * 10, 2000, "AU")], [], tmp_path, run="r1")
    assert read(tmp_path / "stage_reports.csv")[1] == ["r1", "AU", "91.23", "0.08", "2000"]


def sl_metrics(epochs=10):
    return StageMetrics("SL", [{"epoch": e, "train_loss": 1.0 / e, "clean_subset_acc": 0.1 * e / 2,
                                "poisoned_subset_acc": 0.1 * e} for e in range(1, epochs + 1)])


def test_subset_curve_shape_and_byte_identity(tmp_path):
    args = ([EvalReport(0.5, 0.99, [], 10, "SL")], [sl_metrics(), StageMetrics("AU", [{"epoch": 1}])])
    emit_report(*args, tmp_path / "a")
    emit_report(*args, tmp_path / "b")
    rows = read(tmp_path / "a" / "subset_accuracy.csv")
    assert len(rows) == 11 and all(len(r) == 3 for r in rows)
    for name in ("stage_reports.csv", "curves.csv", "subset_accuracy.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_plots_written(tmp_path):
    pytest.importorskip("matplotlib")
    paths = emit_report([EvalReport(0.5, 0.99, [], 10, "SL")], [sl_metrics(3)], tmp_path, plots=True)
    assert (tmp_path / "subset_accuracy.png").is_file() and (tmp_path / "stages.png").is_file()
    assert len(paths) == 5


def test_unwritable_directory(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report([], [], blocker / "sub")


def test_report_round_trip():
    r = EvalReport(0.5, None, [0.5, 0.5], 4, "SL")
    assert EvalReport.from_dict(r.to_dict()) == r
    assert r.as_percent == {"CA": 50.0, "ASR": None}
