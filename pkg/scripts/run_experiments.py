"""Run experiment grids from configs/experiments and collate a report.

    python scripts/run_experiments.py                   # every grid
    python scripts/run_experiments.py systems beta      # a subset
    python scripts/run_experiments.py --out runs/mine --seeds 0 1

Grids sharing an output directory share their trained pipelines, so the
second and later grids mostly decode.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from softpivot import experiments as ex

ROOT = Path(__file__).resolve().parents[1]
SPEC_DIR = ROOT / "configs" / "experiments"


def main() -> int:
    names = sorted(p.stem for p in SPEC_DIR.glob("*.json"))
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("grids", nargs="*", metavar="GRID", help=f"any of {names} (default: all)")
    ap.add_argument("--out", help="override the output directory of every grid")
    ap.add_argument("--seeds", type=int, nargs="+")
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()
    unknown = set(args.grids) - set(names)
    if unknown:
        ap.error(f"unknown grids {sorted(unknown)}; choose from {names}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    outs = set()
    for name in args.grids or names:
        spec = ex.ExperimentSpec.load(SPEC_DIR / f"{name}.json")
        changes = {"train": True, "workers": args.workers, "out": args.out or str(ROOT / spec.out)}
        if args.seeds:
            changes["seeds"] = args.seeds
        spec = dataclasses.replace(spec, **changes)
        rows = ex.ablate(spec)
        print(f"\n== {spec.name} ==\n" + ex.format_table(rows, spec))
        outs.add(spec.out)
    for out in sorted(outs):
        print("report:", ex.report(out))
    return 0


if __name__ == "__main__":
    sys.exit(main())
