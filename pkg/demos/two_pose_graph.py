"""Smallest pose graph: two priors that disagree with a stiff relative edge.

Priors pull the poses to x=0 and x=2, the edge wants them 1 m apart; the
optimum splits the disagreement evenly.

    python3 demos/two_pose_graph.py
"""

from posefusion import Constraint, Pose, PoseGraph, RelativePose, optimize


def line(x):
    return Pose([x, 0, 0], [1, 0, 0, 0])


def main():
    g = PoseGraph([line(0.0), line(2.0)], [
        Constraint.prior(0, line(0.0)),
        Constraint.prior(1, line(2.0)),
        Constraint.relative(0, 1, RelativePose([1, 0, 0], [1, 0, 0, 0]), 1e6),
    ])
    res = optimize(g)
    for k, (e, s) in enumerate(zip(res.energies, res.steps)):
        print(f"iter {k}: energy {e:.6e}  |dz|_inf {s:.3e}")
    print("x =", [round(float(p.t[0]), 6) for p in res.graph.poses])


if __name__ == "__main__":
    main()
