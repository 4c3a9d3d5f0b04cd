"""APR corruption sweep: freeze, noise burst and dropout at levels 0, 0.5, 1.

Prints raw and fused degradation plus the learned APR mask count per level.

    python3 demos/robustness_sweep.py [--seeds 3]
"""

import argparse

from posefusion.benchmark import robustness_seed, robustness_verdict


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=3)
    a = p.parse_args()

    rows = []
    print(f"{'seed':>4} {'kind':>12} {'level':>5} {'raw_deg':>9} {'fused_deg':>9} {'masks':>6}")
    for seed in range(a.seeds):
        for r in robustness_seed(seed):
            rows.append(r)
            print(f"{r.seed:4d} {r.kind:>12} {r.level:5.1f} {r.raw_degradation:9.3f} "
                  f"{r.fused_degradation:9.3f} {r.mask_count:6d}")
    for kind, v in robustness_verdict(rows).items():
        print(f"{kind}: fused degrades less in {v['degradation_ok']}/{v['seeds']} seeds, "
              f"mask count non-increasing in {v['mask_monotone']}/{v['seeds']}")


if __name__ == "__main__":
    main()
