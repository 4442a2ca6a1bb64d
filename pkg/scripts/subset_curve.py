"""Clean-subset vs poisoned-subset train accuracy per SL epoch (the backdoor-learning gap).

    python scripts/subset_curve.py --out runs/curve --epochs 10 --attack badnets

Writes subset_accuracy.csv (and subset_accuracy.png with --plot) to --out.
"""
import argparse
import sys
from pathlib import Path

from decoupled_defense.metrics import emit_report
from decoupled_defense.pipeline import PipelineConfig, run_pipeline

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    p.add_argument("--out", default="runs/curve")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--attack", choices=["badnets", "blended", "sig"], default="badnets")
    p.add_argument("--rate", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--plot", action="store_true")
    a = p.parse_args(argv)

    cfg = PipelineConfig.load(a.config).replace(**{
        "out_dir": a.out, "stage_order": "SL_ONLY", "seed": a.seed, "sl.epochs": a.epochs,
        "attack.name": a.attack, "attack.rate_alpha": a.rate,
    })
    m = run_pipeline(cfg, resume=True)
    sl = m.stage("SL").metrics
    if a.plot:
        from decoupled_defense.metrics import curves_from_dicts
        emit_report(m.reports(), curves_from_dicts([sl]), a.out, run=Path(a.out).name, plots=True)
    print("epoch  clean   poisoned")
    for e in sl["epochs"]:
        print(f"{e['epoch']:5d}  {e['clean_subset_acc']:.4f}  {e['poisoned_subset_acc']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
