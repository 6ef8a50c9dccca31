#!/usr/bin/env python3
"""Five-seed policy comparison, RM ablation, reward-accuracy and sample-size checks.

Runs proposed, best-vs-worst and original-annotation with the rich and the
narrow reward model at eta 0.85 and 0.90, full size and subsampled, then
prints the quantities the end-to-end trend checks look at.
"""

import argparse

import numpy as np

from rsdpo import experiment as ex


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--out", default="runs/desk_trends")
    args = p.parse_args()

    cfg = ex.preset(
        "default",
        seed=args.seed,
        policies=["proposed", "best-vs-worst", "original-annotation"],
        rm_variants=["rich", "narrow"],
        etas=[0.85, 0.90],
        size_controlled=[False, True],
    )
    _, per = ex.run_experiment(cfg, args.out)

    def col(policy, variant, eta=None, sub=False, key="win_rate"):
        return np.array(
            [r[key] for r in per if (r["policy"], r["rm_variant"], r["eta"], r["subsampled"]) == (policy, variant, eta, sub)]
        )

    prop, bvw, orig = col("proposed", "rich", 0.85), col("best-vs-worst", "rich"), col("original-annotation", "none")
    print(f"seeds {list(cfg.seeds)}")
    print(f"win rate vs SFT   proposed {prop.mean():.4f}  best-vs-worst {bvw.mean():.4f}  original {orig.mean():.4f}")
    print(f"proposed - original per seed {np.round(prop - orig, 4).tolist()}")
    d_prop = prop.mean() - col("proposed", "narrow", 0.85).mean()
    d_bvw = bvw.mean() - col("best-vs-worst", "narrow").mean()
    print(f"narrow-RM drop    proposed {d_prop:.4f}  best-vs-worst {d_bvw:.4f}")
    acc_p = col("proposed", "rich", 0.85, key="dpo_reward_accuracy")
    acc_o = col("original-annotation", "none", key="dpo_reward_accuracy")
    print(f"held-out reward accuracy  proposed {acc_p.mean():.3f}  original {acc_o.mean():.3f}")
    full, sub = col("proposed", "rich", 0.90), col("proposed", "rich", 0.90, True)
    se = full.std(ddof=1) / np.sqrt(len(full))
    print(f"eta 0.90          full {full.mean():.4f}  subsampled {sub.mean():.4f}  |diff| {abs(full.mean() - sub.mean()):.4f}  2se {2 * se:.4f}")


if __name__ == "__main__":
    main()
