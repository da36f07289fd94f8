"""Pretrain, train the CSP, then run baseline vs augmented for every agent kind.

    python3 scripts/run_comparison.py --config configs/default.json --out runs/compare
"""

import argparse
from dataclasses import replace

from cfrl import harness
from cfrl.config import RunConfig, load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--out")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else RunConfig(seeds=(0, 1, 2, 3, 4))
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    report = harness.cmd_compare(cfg)
    print(harness.format_table(report))
    for kind, e in report["summary"].items():
        print(f"{kind}: augmented >= baseline on {e['seeds_augmented_ge_baseline']}/{len(cfg.seeds)} seeds")
    if report["failures"]:
        print(f"{len(report['failures'])} cells failed; see {cfg.output_dir}/compare/failures.json")


if __name__ == "__main__":
    main()
