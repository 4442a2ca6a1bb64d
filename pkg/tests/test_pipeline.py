import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from decoupled_defense import audit
from decoupled_defense.cli import main
from decoupled_defense.models import ModelState, build_model
from decoupled_defense.pipeline import (MANIFEST_NAME, STAGE_ORDERS, PipelineConfig, RunManifest, load_data,
                                        run_pipeline, stage_seed, strip_wall_clock, sweep)
from decoupled_defense.poisoning import ConfigError
from decoupled_defense.training import StageError, TrainConfig, supervised_train

TINY = {
    "data": {"n_train": 300, "n_test": 100, "image_size": 8},
    "sl": {"epochs": 1, "batch_size": 64},
    "unlearn": {"epochs": 2, "batch_size": 16},
    "ssl": {"epochs": 1, "batch_size": 8, "unlabeled_ratio": 2, "confidence_tau": 0.5},
    "gamma": 0.05,
}


def tiny(tmp_path, name="run", **changes) -> PipelineConfig:
    cfg = PipelineConfig.from_dict({**TINY, "out_dir": str(tmp_path / name)})
    return cfg.replace(**changes) if changes else cfg


def same_weights(a, b):
    wa, wb = a.weights(), b.weights()
    return all(torch.equal(wa[k], wb[k]) for k in wa)


def without_out_dir(manifest: RunManifest) -> dict:
    d = strip_wall_clock(manifest.to_dict())
    d["config"].pop("out_dir")
    for s in d["stages"]:
        s.pop("reused_from")
    return d


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key"):
        PipelineConfig.from_dict({"gama": 0.01})
    with pytest.raises(ConfigError, match="sl"):
        PipelineConfig.from_dict({"sl": {"epoch": 3}})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"stage_order": "AU_FIRST"})
    with pytest.raises(ConfigError):
        PipelineConfig.from_dict({"ssl": {"confidence_tau": 1.5}})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        PipelineConfig.load(bad)


def test_config_round_trip(tmp_path):
    cfg = tiny(tmp_path, **{"attack.name": "blended", "stage_order": "SL_AU"})
    assert PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_stage_seeds():
    assert stage_seed(0, "SL") == stage_seed(0, "SL")
    seeds = {stage_seed(0, s) for s in ("SL", "FILTER", "AU", "ASSFT", "INIT", "POISON")}
    assert len(seeds) == 6
    assert stage_seed(0, "SL") != stage_seed(1, "SL")


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    audit.violations.clear()
    cfg = tiny(tmp_path_factory.mktemp("p"))
    return cfg, run_pipeline(cfg)


def test_full_pipeline_manifest(full_run):
    cfg, m = full_run
    out = cfg.out_dir
    assert m.status == "complete"
    assert [s.name for s in m.stages] == list(STAGE_ORDERS["SL_FILTER_AU_ASSFT"])
    assert [r.stage_tag for r in m.reports()] == ["SL", "AU", "ASSFT"]
    filt = m.stage("FILTER").filter
    assert filt["n_poisoned"] == filt["n_clean"] == 15 and 0 <= filt["precision_p"] <= 1
    for s in m.stages:
        path = Path(out) / s.checkpoint
        assert path.exists()
        if s.name != "FILTER":
            assert ModelState.load(path).stage_tag == s.name
    for name in ("stage_reports.csv", "curves.csv", "subset_accuracy.csv"):
        assert (Path(out) / name).is_file()
    assert m.strong_augmentation["version"]


def test_manifest_round_trip(full_run, tmp_path):
    cfg, m = full_run
    back = RunManifest.load(Path(cfg.out_dir) / MANIFEST_NAME)
    assert back.dumps() == m.dumps()
    back.save(tmp_path / "copy.json")
    assert (tmp_path / "copy.json").read_text() == m.dumps()


def test_audit_never_triggered(full_run):
    assert audit.violations == []


def test_same_seed_same_manifest(full_run, tmp_path):
    cfg, m = full_run
    again = run_pipeline(cfg.replace(out_dir=str(tmp_path / "again")))
    assert without_out_dir(again) == without_out_dir(m)


def test_resume_after_partial_run(full_run, tmp_path):
    cfg, m = full_run
    out = tmp_path / "resumed"
    shutil.copytree(cfg.out_dir, out)
    partial = RunManifest.load(out / MANIFEST_NAME)
    partial.stages = partial.stages[:2]
    partial.status = "failed"
    partial.save(out / MANIFEST_NAME)
    resumed = run_pipeline(cfg.replace(out_dir=str(out)), resume=True)
    assert without_out_dir(resumed) == without_out_dir(m)
    # rerunning a finished directory is a no-op
    again = run_pipeline(cfg.replace(out_dir=str(out)), resume=True)
    assert strip_wall_clock(again.to_dict()) == strip_wall_clock(resumed.to_dict())


def test_resume_refuses_other_config(full_run, tmp_path):
    cfg, _ = full_run
    out = tmp_path / "other"
    shutil.copytree(cfg.out_dir, out)
    with pytest.raises(ConfigError):
        run_pipeline(cfg.replace(out_dir=str(out), gamma=0.1), resume=True)


def test_reuse_prefix_for_ablation(full_run, tmp_path):
    cfg, m = full_run
    ab = run_pipeline(cfg.replace(out_dir=str(tmp_path / "ab"), stage_order="SL_ASSFT"), reuse_from=cfg.out_dir)
    assert [s.name for s in ab.stages] == ["SL", "FILTER", "ASSFT"]
    assert ab.stages[0].reused_from == cfg.out_dir and ab.stages[2].reused_from is None
    assert ab.stages[0].report == m.stages[0].report


def test_adding_stages_keeps_sl_result(full_run, tmp_path):
    cfg, m = full_run
    only = run_pipeline(cfg.replace(out_dir=str(tmp_path / "sl"), stage_order="SL_ONLY"))
    assert only.stages[0].report == m.stages[0].report


def test_sl_only_without_attack_is_standard_training(tmp_path):
    cfg = tiny(tmp_path, **{"attack.rate_alpha": 0.0, "stage_order": "SL_ONLY"})
    m = run_pipeline(cfg)
    train, _ = load_data(cfg.data)
    init = build_model(cfg.arch_id, 10, stage_seed(cfg.seed, "INIT"))
    plain, _ = supervised_train(init, train, TrainConfig(**{**TINY["sl"], "seed": stage_seed(cfg.seed, "SL")}))
    assert same_weights(plain, ModelState.load(tmp_path / "run" / m.stages[0].checkpoint))
    # the trigger is still evaluated: this is the benign-model ASR
    assert 0 <= m.stages[0].report["attack_success_rate"] <= 1


def test_stage_failure_persists_partial_manifest(tmp_path):
    cfg = tiny(tmp_path, **{"ssl.learning_rate": 1e12})
    with pytest.raises(StageError, match="ASSFT"):
        run_pipeline(cfg)
    m = RunManifest.load(tmp_path / "run" / MANIFEST_NAME)
    assert m.status == "failed" and m.failure["stage"] == "ASSFT"
    assert [s.status for s in m.stages] == ["complete"] * 3 + ["failed"]
    for s in m.stages[:3]:
        assert (tmp_path / "run" / s.checkpoint).exists()


def test_sweep_continues_after_failure(tmp_path):
    # gamma 0.02 keeps only 6 samples for 10 classes, which the filter rejects
    out = sweep(tiny(tmp_path, stage_order="SL_AU"), "gamma", [0.02, 0.05], tmp_path / "sw")
    assert isinstance(out[0], StageError) and isinstance(out[1], RunManifest)
    with open(tmp_path / "sw" / "comparison.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["status"] == "failed"
    assert [r["stage"] for r in rows[1:]] == ["SL", "AU"]


def test_single_value_sweep_equals_run(full_run, tmp_path):
    cfg, m = full_run
    (res,) = sweep(cfg, "poison_rate", [0.1], tmp_path / "one")
    assert without_out_dir(res) == without_out_dir(m)


def test_sweep_rejects_bad_axis(tmp_path):
    with pytest.raises(ConfigError):
        sweep(tiny(tmp_path), "lr", [0.1])
    with pytest.raises(ConfigError):
        sweep(tiny(tmp_path), "gamma", [])


# --- CLI --------------------------------------------------------------------

def write_config(tmp_path, **changes):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(tiny(tmp_path, **changes).to_dict()))
    return path


def test_cli_exit_codes(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"sl": {"epochz": 1}}))
    assert main(["pipeline", "--config", str(bad)]) == 2
    bad.write_text("{")
    assert main(["pipeline", "--config", str(bad)]) == 2
    assert main(["pipeline", "--config", str(tmp_path / "missing.json")]) == 4
    cfg = write_config(tmp_path, **{"stage_order": "SL_AU", "unlearn.learning_rate": 1e30,
                                    "unlearn.loss_clamp": None})
    assert main(["pipeline", "--config", str(cfg)]) == 3
    cfg = write_config(tmp_path, stage_order="SL_ONLY")
    assert main(["pipeline", "--config", str(cfg), "--out-dir", str(tmp_path / "ok")]) == 0
    assert (tmp_path / "ok" / MANIFEST_NAME).is_file()


def test_cli_stage_by_stage(tmp_path, capsys):
    d = tmp_path
    assert main(["make-data", "--out", str(d / "clean"), "--n-train", "300", "--n-test", "100", "--size", "8"]) == 0
    assert main(["poison", "--dataset", str(d / "clean" / "train"), "--rate", "0.1", "--out", str(d / "pois")]) == 0
    assert main(["train-sl", "--dataset", str(d / "pois"), "--epochs", "1", "--batch", "64",
                 "--out", str(d / "sl.pt")]) == 0
    with open(d / "sl.metrics.csv") as fh:
        assert len(list(csv.reader(fh))) == 2
    assert main(["filter", "--ckpt", str(d / "sl.pt"), "--dataset", str(d / "pois"), "--gamma", "0.05",
                 "--report-precision", "--out", str(d / "f.json")]) == 0
    assert "precision=" in capsys.readouterr().out
    assert main(["unlearn", "--ckpt", str(d / "sl.pt"), "--dataset", str(d / "pois"), "--filter", str(d / "f.json"),
                 "--epochs", "1", "--out", str(d / "au.pt")]) == 0
    assert main(["finetune", "--ckpt", str(d / "au.pt"), "--dataset", str(d / "pois"), "--filter",
                 str(d / "f.json"), "--epochs", "1", "--out", str(d / "ft.pt")]) == 0
    assert main(["evaluate", "--ckpt", str(d / "ft.pt"), "--test", str(d / "clean" / "test"),
                 "--attack", str(d / "pois" / "attack.json"), "--out", str(d / "r.json")]) == 0
    report = json.loads((d / "r.json").read_text())
    assert report["stage_tag"] == "ASSFT" and 0 <= report["attack_success_rate"] <= 1
    # a checkpoint with the wrong stage tag is a config error
    assert main(["finetune", "--ckpt", str(d / "ft.pt"), "--dataset", str(d / "pois"), "--filter",
                 str(d / "f.json"), "--epochs", "1", "--out", str(d / "x.pt")]) == 2
    assert main(["evaluate", "--ckpt", str(d / "nope.pt"), "--test", str(d / "clean" / "test")]) == 4


def test_loaded_data_is_seeded():
    cfg = PipelineConfig.from_dict(TINY)
    a, _ = load_data(cfg.data)
    b, _ = load_data(cfg.data)
    assert np.array_equal(a.images, b.images)
