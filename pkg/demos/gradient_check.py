"""Finite-difference check of every analytic kernel gradient.

    python3 demos/gradient_check.py [--seeds 100]
"""

import argparse

from posefusion.gradcheck import run_suite


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, default=100)
    a = p.parse_args()

    for r in run_suite(seeds=a.seeds):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.kernel:>18}  worst rel. error {r.worst:.2e} (seed {r.worst_seed})  {status}")


if __name__ == "__main__":
    main()
