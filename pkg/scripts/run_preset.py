#!/usr/bin/env python3
"""Run an experiment preset and print its results table.

    python3 scripts/run_preset.py threshold-ablation --out runs/threshold --seeds 5
"""

import argparse
import logging

from rsdpo import experiment as ex


def fmt(v):
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("preset", choices=list(ex.PRESETS))
    p.add_argument("--out", default=None, help="output directory (default runs/<preset>)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=None, help="override the preset's seed count")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    over = {"seed": args.seed}
    if args.seeds is not None:
        over["n_seeds"] = args.seeds
    cfg = ex.preset(args.preset, **over)
    table, _ = ex.run_experiment(cfg, args.out or f"runs/{args.preset}")
    cols = ex.RESULT_COLUMNS
    print("  ".join(f"{c:>19}" for c in cols))
    for row in sorted(table, key=lambda r: (r["policy"], r["rm_variant"], str(r["eta"]), str(r["tau"]), r["subsampled"])):
        print("  ".join(f"{fmt(row[c]):>19}" for c in cols))


if __name__ == "__main__":
    main()
