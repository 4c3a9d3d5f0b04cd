"""Fusion of absolute and relative pose predictions.

Modules
-------
geometry        quaternion and pose algebra
pose_graph      pose-graph least squares and sliding-window stream fusion
fusion_kernels  soft fusion and MMTM layers with analytic gradients
losses          pose distances, aleatoric losses, learned loss combiners
metrics         ATE / ATLE / median errors with Horn alignment
dataio          EuRoC and TUM I/O, synthetic trajectories and streams
benchmark       seeded synthetic experiments
gradcheck       analytic vs finite-difference gradient suites
cli             ``posefusion`` command-line driver
"""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .geometry import (
    LiteralPoseDiff,
    Pose,
    RelativePose,
    TangentDelta,
    apply_relative,
    boxplus,
    integrate,
    relative_between,
)
from .pose_graph import (
    Constraint,
    FusionConfig,
    PoseGraph,
    SolverConfig,
    fuse_streams,
    linearize,
    optimize,
    solve_normal_equations,
    total_energy,
)
from .metrics import ate, atle, evaluate, horn_align
from .dataio import Trajectory, load_euroc_groundtruth, load_rpr_csv, load_tum, save_rpr_csv, save_tum
