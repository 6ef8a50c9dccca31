#!/usr/bin/env python3
"""Reward-gap histograms of the rich and narrow reward models on one generation artifact.

Writes CSV/JSON histograms into the run directory and prints a text rendering
with the threshold marked.
"""

import argparse

from rsdpo import experiment as ex
from rsdpo import io
from rsdpo.pdgrs import PDGRSConfig, rescore, reward_gap_histogram
from rsdpo.reward import RewardModelParams


def render(name, h, width=50):
    print(f"{name}: mean {h.mean:.3f}  std {h.std:.3f}  above eta {h.frac_above:.3f} of {h.n_pairs} pairs")
    peak = max(h.counts.max(), 1)
    for lo, hi, n in zip(h.edges[:-1], h.edges[1:], h.counts):
        mark = "|" if lo < h.threshold <= hi else " "
        print(f"  [{lo:.3f},{hi:.3f}) {mark} {'#' * int(round(width * n / peak))} {n}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eta", type=float, default=0.85)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--out", default="runs/gap_histograms")
    args = p.parse_args()

    cfg = ex.preset("default", n_seeds=1, seed=args.seed, rm_variants=["rich", "narrow"])
    run = ex.RunDir(args.out, cfg, args.seed)
    ex.stage_synth(run)
    ex.stage_sft(run)
    for variant in cfg.rm_variants:
        ex.stage_rm(run, variant)
    cands = ex.stage_generate(run, "rich")
    ex.stage_histogram(run, "rich", args.eta, args.tau)
    narrow = rescore(cands, io.load_checkpoint(run / "rm_narrow.ckpt", RewardModelParams))
    cfg_p = PDGRSConfig(args.tau, args.eta)
    render("rich RM", reward_gap_histogram(cands, cfg_p))
    render("narrow RM, same responses", reward_gap_histogram(narrow, cfg_p))


if __name__ == "__main__":
    main()
