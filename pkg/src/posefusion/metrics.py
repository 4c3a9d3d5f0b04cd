"""Trajectory error metrics.

``ate`` aligns the estimate to ground truth with Horn's closed-form
quaternion method and reports the RMSE of the remaining translation
offsets. ``atle`` integrates a relative-pose stream from the true start and
averages the position error over all frames. Median absolute and relative
errors are reported in meters and degrees.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, EmptyInput, LengthMismatch
from .geometry import Pose, RelativePose, integrate, quat_angle, quat_to_rotmat, relative_between


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """``x -> scale * R(rotation) x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def apply(self, points) -> np.ndarray:
        P = np.asarray(points, dtype=float)
        return self.scale * P @ self.matrix.T + self.translation


def _points(x) -> np.ndarray:
    if len(x) and isinstance(x[0], Pose):
        return np.array([p.t for p in x])
    return np.asarray(x, dtype=float).reshape(-1, 3)


def horn_align(est, gt, with_scale: bool = False, allow_degenerate: bool = False) -> RigidTransform:
    """Least-squares transform mapping ``est`` points onto ``gt`` points.

    Rotation is the dominant eigenvector of Horn's symmetric 4x4 matrix built
    from the centered cross-covariance. Collinear or coincident point sets
    have no unique rotation and raise :class:`DegenerateGeometry` unless
    ``allow_degenerate`` is set, in which case one minimizer is returned.
    """
    P, Q = _points(est), _points(gt)
    if P.shape != Q.shape:
        raise LengthMismatch(f"{len(P)} estimated points for {len(Q)} reference points")
    if len(P) < 3 and not allow_degenerate:
        raise DegenerateGeometry("need at least 3 point pairs")
    if len(P) == 0:
        raise EmptyInput("no points to align")
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    Pc, Qc = P - mp, Q - mq
    sv = np.linalg.svd(Pc, compute_uv=False) if len(P) > 1 else np.zeros(1)
    if not allow_degenerate and (len(sv) < 2 or sv[1] <= 1e-10 * max(sv[0], 1e-300) or sv[0] == 0):
        raise DegenerateGeometry("points are collinear or coincident")

    M = Pc.T @ Qc
    (Sxx, Sxy, Sxz), (Syx, Syy, Syz), (Szx, Szy, Szz) = M
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    _, vecs = np.linalg.eigh(N)
    q = vecs[:, -1]
    q = q if q[0] >= 0 else -q
    R = quat_to_rotmat(q)
    scale = 1.0
    if with_scale:
        denom = float(np.sum(Pc**2))
        if denom <= 0:
            raise DegenerateGeometry("cannot estimate scale from coincident points")
        scale = float(np.sum(Qc * (Pc @ R.T))) / denom
    return RigidTransform(q, mq - scale * R @ mp, scale)


def alignment_objective(T: RigidTransform, est, gt) -> float:
    return float(np.sum((_points(gt) - T.apply(_points(est))) ** 2))


def ate(est, gt, with_scale: bool = False) -> float:
    """RMSE of translation residuals after aligning ``est`` onto ``gt``."""
    P, Q = _points(est), _points(gt)
    if P.shape != Q.shape:
        raise LengthMismatch(f"{len(P)} estimated poses for {len(Q)} reference poses")
    if len(P) == 0:
        raise EmptyInput("empty trajectory")
    T = horn_align(P, Q, with_scale, allow_degenerate=True)
    return float(np.sqrt(np.mean(np.sum((Q - T.apply(P)) ** 2, axis=1))))


def atle(rel_pred: Sequence[RelativePose], gt: Sequence[Pose], mode: str = "mean") -> float:
    """Position error of the relative stream integrated from ``gt[0]``.

    ``mode="mean"`` averages over all frames (the anchor frame included);
    ``mode="final"`` reports only the last frame.
    """
    if len(gt) == 0:
        raise EmptyInput("empty trajectory")
    if len(rel_pred) != len(gt) - 1:
        raise LengthMismatch(f"{len(rel_pred)} relative poses for {len(gt)} frames")
    chain = integrate(gt[0], rel_pred)
    err = np.linalg.norm(_points(chain) - _points(gt), axis=1)
    if mode == "mean":
        return float(err.mean())
    if mode == "final":
        return float(err[-1])
    raise ValueError(f"unknown mode {mode!r}")


def _medians(ta, tb, qa, qb) -> tuple[float, float]:
    if len(ta) == 0:
        raise EmptyInput("no frames")
    if len(ta) != len(tb):
        raise LengthMismatch(f"{len(ta)} estimates for {len(tb)} references")
    dp = np.linalg.norm(np.asarray(ta) - np.asarray(tb), axis=1)
    dq = np.degrees([quat_angle(a, b) for a, b in zip(qa, qb)])
    return float(np.median(dp)), float(np.median(dq))


def median_errors(est: Sequence[Pose], gt: Sequence[Pose]) -> tuple[float, float]:
    """Median position error (m) and orientation error (deg)."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimates for {len(gt)} references")
    return _medians([p.t for p in est], [p.t for p in gt], [p.q for p in est], [p.q for p in gt])


def median_relative_errors(
    rel_pred: Sequence[RelativePose], rel_gt: Sequence[RelativePose]
) -> tuple[float, float]:
    if len(rel_pred) != len(rel_gt):
        raise LengthMismatch(f"{len(rel_pred)} estimates for {len(rel_gt)} references")
    return _medians([d.dt for d in rel_pred], [d.dt for d in rel_gt], [d.dq for d in rel_pred], [d.dq for d in rel_gt])


def consecutive_relatives(poses: Sequence[Pose]) -> list[RelativePose]:
    return [relative_between(a, b) for a, b in zip(poses[:-1], poses[1:])]


@dataclass
class TrajectoryReport:
    e_med_p: float
    e_med_q: float
    d_e_med_p: float
    d_e_med_q: float
    e_ate_p: float
    e_atle_p: float | None
    frames: int

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate(
    est: Sequence[Pose], gt: Sequence[Pose], rel_pred: Sequence[RelativePose] | None = None
) -> TrajectoryReport:
    """All trajectory metrics for one estimate.

    Relative errors use ``rel_pred`` when given, otherwise the deltas between
    consecutive estimated poses. ATLE needs ``rel_pred`` and is ``None``
    without it.
    """
    e_p, e_q = median_errors(est, gt)
    rel_gt = consecutive_relatives(gt)
    rel = consecutive_relatives(est) if rel_pred is None else list(rel_pred)
    if rel_gt:
        d_p, d_q = median_relative_errors(rel, rel_gt)
    else:
        d_p = d_q = 0.0
    return TrajectoryReport(
        e_med_p=e_p,
        e_med_q=e_q,
        d_e_med_p=d_p,
        d_e_med_q=d_q,
        e_ate_p=ate(est, gt),
        e_atle_p=None if rel_pred is None else atle(rel_pred, gt),
        frames=len(gt),
    )
