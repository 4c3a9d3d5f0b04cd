"""Seeded synthetic benchmark: raw APR vs integrated RPR vs windowed PGO fusion.

    python3 demos/fusion_benefit.py [--seeds 20] [--frames 200]
"""

import argparse
import time

import numpy as np

from posefusion.benchmark import METHODS, BenchConfig, run_seed, summarize


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--frames", type=int, default=200)
    a = p.parse_args()

    start = time.perf_counter()
    results = [run_seed(s, BenchConfig(frames=a.frames)) for s in range(a.seeds)]
    out = summarize(results, threshold=0.8)
    print(f"{'seed':>4} " + " ".join(f"{m:>15}" for m in METHODS) + "   ratio")
    for r in results:
        row = " ".join(f"{r.reports[m].e_med_p:15.3f}" for m in METHODS)
        print(f"{r.seed:4d} {row}   {r.ratio:.3f}")
    ratios = np.array([r.ratio for r in results])
    print(f"median fused/apr ratio {np.median(ratios):.3f}; "
          f"{out['ratio']['seeds_within']}/{a.seeds} seeds <= 0.8; {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
