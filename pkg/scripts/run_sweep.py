"""CSP hidden-width sweep; prints the mean final and held-out |dr| per width.

    python3 scripts/run_sweep.py --values 64 128 256 --out runs/sweep
"""

import argparse
from dataclasses import replace

import numpy as np

from cfrl import harness
from cfrl.config import RunConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out")
    ap.add_argument("--values", type=int, nargs="+", default=list(harness.SWEEP_VALUES))
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig(seeds=(0, 1, 2))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    res = harness.cmd_sweep(cfg, args.values)
    print(f"{'hidden':>6} {'final |dr|':>11} {'eval |dr|':>10}")
    for v in args.values:
        rows = [r for r in res["rows"] if r["hidden"] == v]
        print(f"{v:>6} {np.mean([r['final_mean_abs_dr'] for r in rows]):>11.4f} "
              f"{np.mean([r['eval_mean_abs_dr'] for r in rows]):>10.4f}")
    print(f"curves in {res['dir']}")


if __name__ == "__main__":
    main()
