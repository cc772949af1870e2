"""Minutes-scale end-to-end run: every pipeline step, evaluation and report.

    python scripts/smoke.py [--out runs/smoke]
"""
import argparse
import logging

from softpivot import experiments as ex
from softpivot.pipeline import fast_config, run_pipeline


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/smoke")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    cfg = fast_config(seed=args.seed)
    run = run_pipeline(cfg, args.out)
    res = ex.evaluate(cfg, run)
    for name, r in res["systems"].items():
        print(f"{name:8s} BLEU {r['bleu']:6.2f}  inconsistency {r['inconsistency_rate']:.4f}")
    print("report:", ex.report(args.out))


if __name__ == "__main__":
    main()
