"""Command-line entry point. Exit codes: 0 ok, 2 config error, 3 stage failure, 4 I/O failure."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datasets import make_shapes_split
from .filtering import FilterResult, filter_precision, filter_split, loss_filter_split
from .metrics import evaluate, write_curves
from .models import ModelState, build_model
from .pipeline import PipelineConfig, run_pipeline, sweep
from .poisoning import CLEAN_LABEL, POISON_LABEL, ConfigError, LabeledDataset, PoisonConfig, TriggerSpec, \
    poison_dataset
from .semi import SSLConfig, ssl_train, strip_labels
from .training import StageError, TrainConfig, supervised_train
from .unlearning import UnlearnConfig, active_unlearn

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_IO = 0, 2, 3, 4
ATTACK_FILE = "attack.json"


def _load_ds(path) -> LabeledDataset:
    return LabeledDataset.load(path)


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_make_data(a):
    train, test = make_shapes_split(a.n_train, a.n_test, a.seed, a.size, a.difficulty)
    train.save(Path(a.out) / "train")
    test.save(Path(a.out) / "test")
    print(f"wrote {len(train)} train / {len(test)} test images to {a.out}")


def cmd_poison(a):
    clean = _load_ds(a.dataset)
    spec = TriggerSpec.for_attack(a.attack, clean.image_shape)
    mode = a.label_mode or (CLEAN_LABEL if a.attack == "sig" else POISON_LABEL)
    ds = poison_dataset(clean, PoisonConfig(a.rate, a.target, mode, a.seed), spec)
    ds.save(a.out)
    _write_json(Path(a.out) / ATTACK_FILE, {"spec": spec.to_dict(), "target_class": a.target})
    print(f"poisoned {int(round(a.rate * len(clean)))} of {len(clean)} samples -> {a.out}")


def cmd_train_sl(a):
    ds = _load_ds(a.dataset)
    model = build_model(a.arch, ds.class_count, a.seed, ds.image_shape[2])
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch_size, learning_rate=a.lr, momentum=a.momentum,
                      seed=a.seed)
    model, metrics = supervised_train(model, ds, cfg)
    model.save(a.out)
    write_curves(a.metrics or Path(a.out).with_suffix(".metrics.csv"), [metrics], Path(a.out).stem)
    last = metrics.epochs[-1] if metrics.epochs else {}
    print(f"SL done: train_acc={last.get('train_acc', float('nan')):.4f} -> {a.out}")


def cmd_filter(a):
    model, ds = ModelState.load(a.ckpt), _load_ds(a.dataset)
    split = filter_split if a.method == "entropy" else loss_filter_split
    res = split(model, ds, a.gamma)
    res.save(a.out)
    msg = f"|D'_p|={len(res.poisoned_idx)} |D'_c|={len(res.clean_idx)}"
    if a.report_precision and ds.poison_mask.any():
        p, c = filter_precision(res, ds)
        msg += f" precision={p:.4f} purity={c:.4f}"
    print(msg)


def cmd_unlearn(a):
    model, ds, res = ModelState.load(a.ckpt), _load_ds(a.dataset), FilterResult.load(a.filter)
    cfg = UnlearnConfig(epochs=a.epochs, learning_rate=a.lr, seed=a.seed,
                        loss_clamp=None if a.no_clamp else a.loss_clamp)
    out, m = active_unlearn(model, ds, res.poisoned_idx, cfg)
    out.save(a.out)
    print(f"AU done: forget-set loss {m.final['forget_loss_start']:.4g} -> "
          f"{m.epochs[-1]['forget_loss'] if m.epochs else float('nan'):.4g}")


def cmd_finetune(a):
    model, ds, res = ModelState.load(a.ckpt), _load_ds(a.dataset), FilterResult.load(a.filter)
    cfg = SSLConfig(epochs=a.epochs, confidence_tau=a.tau, lambda_u=a.lambda_u, learning_rate=a.lr, seed=a.seed)
    out, m = ssl_train(model, strip_labels(ds, res.clean_idx), cfg)
    out.save(a.out)
    print(f"ASSFT done ({a.epochs} epochs) -> {a.out}")


def cmd_evaluate(a):
    model, test = ModelState.load(a.ckpt), _load_ds(a.test)
    spec, target = None, a.target
    if a.attack:
        d = json.loads(Path(a.attack).read_text())
        spec = TriggerSpec.from_dict(d.get("spec", d))
        if target is None:
            target = d.get("target_class")
        if target is None:
            raise ConfigError("--target is required when the attack file does not name one")
    report = evaluate(model, test, spec, target)
    if a.out:
        _write_json(a.out, report.to_dict())
    print(json.dumps(report.as_percent))


def cmd_pipeline(a):
    cfg = PipelineConfig.load(a.config)
    if a.out_dir:
        cfg = cfg.replace(out_dir=a.out_dir)
    m = run_pipeline(cfg, resume=a.resume)
    for r in m.reports():
        print(f"{r.stage_tag:6s} {r.as_percent}")


def cmd_sweep(a):
    cfg = PipelineConfig.load(a.config)
    results = sweep(cfg, a.axis, a.values, a.out_dir)
    failed = [r for r in results if isinstance(r, Exception)]
    for v, r in zip(a.values, results):
        if isinstance(r, Exception):
            print(f"{a.axis}={v}: FAILED ({r})")
        else:
            final = r.reports()[-1]
            print(f"{a.axis}={v}: {final.stage_tag} {final.as_percent}")
    if failed:
        raise StageError(f"{len(failed)} of {len(results)} sweep runs failed")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dlp-defense", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-data", help="render the procedural shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n-train", type=int, default=5000)
    s.add_argument("--n-test", type=int, default=2000)
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--difficulty", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_data)

    s = sub.add_parser("poison", help="inject a trigger into a clean dataset")
    s.add_argument("--dataset", required=True)
    s.add_argument("--attack", choices=["badnets", "blended", "sig"], default="badnets")
    s.add_argument("--rate", type=float, default=0.1)
    s.add_argument("--target", type=int, default=0)
    s.add_argument("--label-mode", choices=[POISON_LABEL, CLEAN_LABEL])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_poison)

    s = sub.add_parser("train-sl", help="standard supervised training")
    s.add_argument("--dataset", required=True)
    s.add_argument("--arch", default="small_cnn")
    s.add_argument("--epochs", type=int, default=10)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--momentum", type=float, default=0.9)
    s.add_argument("--batch-size", "--batch", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--metrics", help="per-epoch CSV (default: <out>.metrics.csv)")
    s.set_defaults(fn=cmd_train_sl)

    s = sub.add_parser("filter", help="split into filtered poisoned / clean subsets")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--gamma", type=float, default=0.01)
    s.add_argument("--method", choices=["entropy", "loss"], default="entropy")
    s.add_argument("--report-precision", action="store_true",
                   help="score the split against the stored ground truth (evaluation only)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("unlearn", help="gradient ascent on the filtered poisoned subset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--filter", required=True)
    s.add_argument("--epochs", type=int, default=20)
    s.add_argument("--lr", type=float, default=0.01)
    s.add_argument("--loss-clamp", type=float, default=UnlearnConfig.loss_clamp)
    s.add_argument("--no-clamp", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_unlearn)

    s = sub.add_parser("finetune", help="semi-supervised fine-tuning with the filtered clean subset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--filter", required=True)
    s.add_argument("--epochs", type=int, default=SSLConfig.epochs)
    s.add_argument("--tau", type=float, default=0.95)
    s.add_argument("--lambda-u", type=float, default=1.0)
    s.add_argument("--lr", type=float, default=SSLConfig.learning_rate)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_finetune)

    s = sub.add_parser("evaluate", help="clean accuracy and attack success rate")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--test", required=True)
    s.add_argument("--attack", help=f"trigger spec JSON, e.g. the {ATTACK_FILE} written by 'poison'")
    s.add_argument("--target", type=int)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("pipeline", help="run a configured end-to-end defense")
    s.add_argument("--config", required=True)
    s.add_argument("--resume", action="store_true")
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_pipeline)

    s = sub.add_parser("sweep", help="one pipeline per poisoning or filtering rate")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", choices=["rate", "gamma", "poison_rate", "filter_rate"], required=True)
    s.add_argument("--values", type=float, nargs="+", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(fn=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.fn(args)
    except (ConfigError, json.JSONDecodeError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as e:
        print(f"stage failure: {e}", file=sys.stderr)
        return EXIT_STAGE
    except OSError as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
