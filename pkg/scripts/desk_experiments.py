"""Desk-scale experiment runner: main defense over seeds, clean baselines, stage
ablations and the poisoning-rate / filtering-rate sweeps.

    python scripts/desk_experiments.py --out runs/desk --what all
    python scripts/desk_experiments.py --out runs/desk --what main --seeds 0 1 2

Finished runs are resumed from their manifests. A summary table is printed and
written to <out>/summary.csv.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path

from decoupled_defense.pipeline import PipelineConfig, run_pipeline, sweep

ROOT = Path(__file__).resolve().parents[1]
GROUPS = ("main", "baseline", "no_attack", "ablation", "rates", "gammas")


def summarize(name, manifest, rows):
    filt = next((s.filter for s in manifest.stages if s.name == "FILTER"), None) or {}
    for r in manifest.reports():
        asr = "" if r.attack_success_rate is None else f"{100 * r.attack_success_rate:.2f}"
        rows.append([name, r.stage_tag, f"{100 * r.clean_accuracy:.2f}", asr,
                     "" if filt.get("precision_p") is None else f"{filt['precision_p']:.3f}"])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "desk.json"))
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--what", nargs="+", choices=GROUPS + ("all",), default=["all"])
    p.add_argument("-v", "--verbose", action="store_true")
    a = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(asctime)s %(message)s")

    base = PipelineConfig.load(a.config)
    out = Path(a.out)
    what = set(GROUPS) if "all" in a.what else set(a.what)
    rows = []

    def run(name, reuse=None, **changes):
        m = run_pipeline(base.replace(out_dir=str(out / name), **changes), resume=True, reuse_from=reuse)
        summarize(name, m, rows)
        return m

    for s in a.seeds:
        if "main" in what or "ablation" in what:
            run(f"main_s{s}", seed=s)
        if "baseline" in what:
            run(f"clean_sl_s{s}", seed=s, stage_order="SL_ONLY", **{"attack.rate_alpha": 0.0})
    s0 = a.seeds[0]
    if "no_attack" in what:
        run(f"clean_full_s{s0}", seed=s0, **{"attack.rate_alpha": 0.0})
    if "ablation" in what:
        run(f"SL_AU_s{s0}", reuse=out / f"main_s{s0}", seed=s0, stage_order="SL_AU")
        run(f"SL_ASSFT_s{s0}", reuse=out / f"main_s{s0}", seed=s0, stage_order="SL_ASSFT")
        run(f"SL_ASSFT_AU_s{s0}", reuse=out / f"SL_ASSFT_s{s0}", seed=s0, stage_order="SL_ASSFT_AU")
    for group, axis, values in (("rates", "poison_rate", [0.3, 0.5]), ("gammas", "filter_rate", [0.05, 0.1])):
        if group in what:
            for v, m in zip(values, sweep(base.replace(seed=s0), axis, values, out / f"sweep_{axis}_s{s0}",
                                          resume=True)):
                if isinstance(m, Exception):
                    rows.append([f"{axis}={v}", "failed", "", "", ""])
                else:
                    summarize(f"{axis}={v}", m, rows)

    out.mkdir(parents=True, exist_ok=True)
    header = ["run", "stage", "CA", "ASR", "filter_precision"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    width = max(len(r[0]) for r in rows) if rows else 10
    print(f"{'run':{width}s}  stage   CA      ASR     prec")
    for r in rows:
        print(f"{r[0]:{width}s}  {r[1]:6s}  {r[2]:6s}  {r[3]:6s}  {r[4]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
