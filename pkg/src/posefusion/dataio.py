"""Trajectory I/O, synthetic trajectories and simulated prediction streams.

File formats
------------
EuRoC ASL ground truth (``state_groundtruth_estimate0/data.csv``)::

    #timestamp, p_RS_R_x [m], p_RS_R_y [m], p_RS_R_z [m], q_RS_w [], q_RS_x [], q_RS_y [], q_RS_z [], ...

EuRoC ASL IMU (``imu0/data.csv``)::

    #timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y,w_RS_S_z,a_RS_S_x [m s^-2],a_RS_S_y,a_RS_S_z

TUM trajectory text, ``q_w`` last and timestamps in seconds::

    timestamp tx ty tz qx qy qz qw

Relative-pose CSV written by the CLI, one delta per line::

    # dt_x,dt_y,dt_z,dq_w,dq_x,dq_y,dq_z

Random streams are drawn from ``numpy.random.default_rng(seed)``, i.e. the
PCG64 bit generator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NonMonotoneTimestamps, ParseError, SpanOutOfRange, ZeroQuaternion
from .geometry import (
    Pose,
    RelativePose,
    quat_exp,
    quat_mul,
    quat_conj,
    quat_normalize,
    rotate,
    stack_poses,
)


@dataclass(frozen=True, eq=False)
class Trajectory:
    timestamps: np.ndarray  # int64 nanoseconds
    poses: tuple

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        poses = tuple(self.poses)
        if len(ts) != len(poses):
            raise ValueError(f"{len(ts)} timestamps for {len(poses)} poses")
        if len(ts) > 1 and np.any(np.diff(ts) <= 0):
            raise NonMonotoneTimestamps("timestamps must be strictly increasing")
        ts.flags.writeable = False
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "poses", poses)

    def __len__(self):
        return len(self.poses)

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


@dataclass(frozen=True)
class ImuRecord:
    timestamp: int
    gyro: tuple
    accel: tuple


@dataclass(frozen=True)
class NoiseModel:
    sigma_t: float = 0.0
    sigma_theta: float = 0.0
    bias_t: tuple = (0.0, 0.0, 0.0)
    outlier_prob: float = 0.0
    outlier_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma_t < 0 or self.sigma_theta < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")
        if len(self.bias_t) != 3:
            raise ValueError("bias_t must have 3 components")


# Stream settings of the synthetic benchmark.
def default_apr_noise(seed: int = 0) -> NoiseModel:
    return NoiseModel(sigma_t=0.5, sigma_theta=0.05, seed=seed)


def default_rpr_noise(seed: int = 0) -> NoiseModel:
    return NoiseModel(sigma_t=0.005, sigma_theta=0.001, bias_t=(0.001, 0.0, 0.0), seed=seed)


CORRUPTION_KINDS = ("noise_burst", "freeze", "dropout")


@dataclass(frozen=True)
class CorruptionSpec:
    """Stream-level corruption of frames ``span[0] <= f < span[1]``.

    ``level`` in [0, 1]. ``noise_burst`` multiplies the stream's noise std by
    ``1 + 99 * level`` over the span; ``freeze`` and ``dropout`` affect the
    first ``ceil(level * len(span))`` frames of the span.
    """

    kind: str
    level: float
    span: tuple
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.level <= 1.0:
            raise ValueError("level must lie in [0, 1]")
        a, b = self.span
        if a < 0 or b < a:
            raise SpanOutOfRange(f"invalid span {self.span}")


# -- parsing helpers -----------------------------------------------------------


def _data_lines(path):
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield lineno, line


def _floats(fields, lineno):
    try:
        values = [float(f) for f in fields]
    except ValueError as exc:
        raise ParseError(str(exc), lineno) from None
    if not all(math.isfinite(v) for v in values):
        raise ParseError("non-finite value", lineno)
    return values


def _timestamp_ns(text: str, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise ParseError(f"bad timestamp {text!r}", lineno) from None


def _check_monotone(ts, lines):
    for k in range(1, len(ts)):
        if ts[k] <= ts[k - 1]:
            raise NonMonotoneTimestamps(f"line {lines[k]}: timestamp {ts[k]} not after {ts[k - 1]}")


# -- EuRoC ---------------------------------------------------------------------


def load_euroc_groundtruth(path) -> Trajectory:
    ts, poses, lines = [], [], []
    for lineno, line in _data_lines(path):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 8:
            raise ParseError(f"expected at least 8 fields, got {len(fields)}", lineno)
        t = _timestamp_ns(fields[0], lineno)
        v = _floats(fields[1:8], lineno)
        try:
            q = quat_normalize(v[3:7])
        except ZeroQuaternion:
            raise ParseError("zero quaternion", lineno) from None
        ts.append(t)
        poses.append(Pose(v[0:3], q))
        lines.append(lineno)
    if not poses:
        raise ParseError(f"{path}: no data rows")
    _check_monotone(ts, lines)
    return Trajectory(np.array(ts, dtype=np.int64), poses)


def load_euroc_imu(path) -> list[ImuRecord]:
    out, lines = [], []
    for lineno, line in _data_lines(path):
        fields = [f.strip() for f in line.split(",")]
        if len(fields) < 7:
            raise ParseError(f"expected 7 fields, got {len(fields)}", lineno)
        t = _timestamp_ns(fields[0], lineno)
        v = _floats(fields[1:7], lineno)
        out.append(ImuRecord(t, tuple(v[0:3]), tuple(v[3:6])))
        lines.append(lineno)
    _check_monotone([r.timestamp for r in out], lines)
    return out


# -- TUM -----------------------------------------------------------------------


def _seconds_to_ns(text: str, lineno: int) -> int:
    try:
        return int((Decimal(text) * 1_000_000_000).to_integral_value())
    except InvalidOperation:
        raise ParseError(f"bad timestamp {text!r}", lineno) from None


def _ns_to_seconds(ns: int) -> str:
    sign = "-" if ns < 0 else ""
    s, frac = divmod(abs(int(ns)), 1_000_000_000)
    return f"{sign}{s}.{frac:09d}"


def load_tum(path) -> Trajectory:
    ts, poses, lines = [], [], []
    for lineno, line in _data_lines(path):
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, got {len(fields)}", lineno)
        t = _seconds_to_ns(fields[0], lineno)
        v = _floats(fields[1:], lineno)
        qx, qy, qz, qw = v[3:7]
        try:
            q = quat_normalize([qw, qx, qy, qz])
        except ZeroQuaternion:
            raise ParseError("zero quaternion", lineno) from None
        ts.append(t)
        poses.append(Pose(v[0:3], q))
        lines.append(lineno)
    _check_monotone(ts, lines)
    return Trajectory(np.array(ts, dtype=np.int64), poses)


def save_tum(traj: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ns, p in zip(traj.timestamps, traj.poses):
            w, x, y, z = p.q
            vals = [*p.t, x, y, z, w]
            fh.write(_ns_to_seconds(ns) + " " + " ".join(repr(float(v)) for v in vals) + "\n")


RPR_HEADER = "# dt_x,dt_y,dt_z,dq_w,dq_x,dq_y,dq_z"


def save_rpr_csv(deltas: Sequence[RelativePose], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(RPR_HEADER + "\n")
        for d in deltas:
            fh.write(",".join(repr(float(v)) for v in d.as_vector()) + "\n")


def load_rpr_csv(path) -> list[RelativePose]:
    out = []
    for lineno, line in _data_lines(path):
        fields = line.split(",")
        if len(fields) != 7:
            raise ParseError(f"expected 7 fields, got {len(fields)}", lineno)
        v = _floats(fields, lineno)
        try:
            out.append(RelativePose(v[0:3], quat_normalize(v[3:7])))
        except ZeroQuaternion:
            raise ParseError("zero quaternion", lineno) from None
    return out


# -- synthetic data ------------------------------------------------------------


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1 or len(x) < 2:
        return x
    pad = width // 2
    xp = np.concatenate([np.full(pad, x[0]), x, np.full(pad, x[-1])])
    kernel = np.ones(width) / width
    return np.convolve(xp, kernel, mode="valid")[: len(x)]


def _euler_to_quat(roll, pitch, yaw) -> np.ndarray:
    qx = quat_exp(np.stack([roll, 0 * roll, 0 * roll], axis=-1))
    qy = quat_exp(np.stack([0 * pitch, pitch, 0 * pitch], axis=-1))
    qz = quat_exp(np.stack([0 * yaw, 0 * yaw, yaw], axis=-1))
    return quat_mul(qz, quat_mul(qy, qx))


def synth_trajectory(seed: int, n_frames: int, rate_hz: float = 20.0, amplitude: float = 2.0) -> Trajectory:
    """Smooth seeded 6DoF trajectory.

    Position is a per-axis sum of three sinusoids with periods of at least
    4 s (longer at low frame rates, so consecutive frames stay closer than
    ``0.2 * amplitude``). Yaw follows the smoothed horizontal heading and
    roll/pitch oscillate gently.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if not rate_hz > 0:
        raise ValueError("rate_hz must be > 0")
    rng = np.random.default_rng(seed)
    min_period = max(4.0, 60.0 / rate_hz)
    periods = rng.uniform(min_period, 3.0 * min_period, size=(3, 3))
    weights = rng.dirichlet(np.ones(3), size=3)  # each axis: amplitudes sum to `amplitude`
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(3, 3))
    rp_periods = rng.uniform(min_period, 3.0 * min_period, size=2)
    rp_phases = rng.uniform(0.0, 2.0 * np.pi, size=2)

    time = np.arange(n_frames) / rate_hz
    arg = 2.0 * np.pi * time[:, None, None] / periods[None] + phases[None]
    pos = amplitude * np.sum(weights[None] * np.sin(arg), axis=2)
    vel = amplitude * np.sum(weights[None] * (2.0 * np.pi / periods[None]) * np.cos(arg), axis=2)

    speed = np.hypot(vel[:, 0], vel[:, 1])
    heading = np.arctan2(vel[:, 1], vel[:, 0])
    moving = speed > 1e-9
    heading = np.where(moving, heading, 0.0)
    if np.any(moving):
        first = int(np.argmax(moving))
        for k in range(n_frames):
            if not moving[k]:
                heading[k] = heading[k - 1] if k > 0 else heading[first]
    yaw = _smooth(np.unwrap(heading), max(1, int(round(0.5 * rate_hz))))

    tilt = min(0.1, 0.05 * amplitude)
    roll = tilt * np.sin(2.0 * np.pi * time / rp_periods[0] + rp_phases[0])
    pitch = tilt * np.sin(2.0 * np.pi * time / rp_periods[1] + rp_phases[1])
    Q = _euler_to_quat(roll, pitch, yaw)

    ts = np.round(np.arange(n_frames) * (1e9 / rate_hz)).astype(np.int64)
    return Trajectory(ts, [Pose(p, q) for p, q in zip(pos, Q)])


def _random_rotations(rng, sigma: float, n: int) -> np.ndarray:
    """``n`` rotation vectors with N(0, sigma) angle about a uniform axis."""
    axes = rng.normal(size=(n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    angles = rng.normal(0.0, 1.0, size=n) * sigma
    return axes * angles[:, None]


def simulate_apr(gt: Trajectory, nm: NoiseModel) -> list[Pose]:
    """APR-like stream: ground truth plus iid translation/rotation noise and outliers."""
    rng = np.random.default_rng(nm.seed)
    n = len(gt)
    noise_t = rng.normal(size=(n, 3)) * nm.sigma_t
    outlier = rng.random(n) < nm.outlier_prob
    rot = _random_rotations(rng, nm.sigma_theta, n)
    noise_t = np.where(outlier[:, None], noise_t * nm.outlier_scale, noise_t)
    T, Q = stack_poses(gt.poses)
    Qn = quat_mul(Q, quat_exp(rot))
    return [Pose(t, q) for t, q in zip(T + noise_t, Qn)]


def simulate_rpr(gt: Trajectory, nm: NoiseModel) -> list[RelativePose]:
    """RPR-like stream: exact body-frame deltas plus noise and a constant translation bias."""
    if len(gt) < 2:
        raise ValueError("need at least two poses")
    rng = np.random.default_rng(nm.seed)
    n = len(gt) - 1
    noise_t = rng.normal(size=(n, 3)) * nm.sigma_t + np.asarray(nm.bias_t, dtype=float)
    rot = _random_rotations(rng, nm.sigma_theta, n)
    T, Q = stack_poses(gt.poses)
    ci = quat_conj(Q[:-1])
    dt = rotate(ci, T[1:] - T[:-1])
    dq = quat_normalize(quat_mul(ci, Q[1:]))
    dq = quat_mul(dq, quat_exp(rot))
    return [RelativePose(t, q) for t, q in zip(dt + noise_t, dq)]


def corrupt_stream(stream: Sequence, spec: CorruptionSpec, noise: NoiseModel | None = None) -> list:
    """Apply a stream-level corruption to a list of poses or relative poses.

    ``noise`` gives the base noise of the stream and is required for
    ``noise_burst``; the extra noise is drawn so that the total std becomes
    ``(1 + 99 * level)`` times the base std. Dropped entries become ``None``.
    """
    out = list(stream)
    a, b = spec.span
    if b > len(out):
        raise SpanOutOfRange(f"span {spec.span} outside stream of {len(out)}")
    if spec.level == 0.0 or a == b:
        return out
    if spec.kind == "noise_burst":
        if noise is None:
            raise ValueError("noise_burst needs the stream's base NoiseModel")
        rng = np.random.default_rng(spec.seed)
        gain = math.sqrt((1.0 + 99.0 * spec.level) ** 2 - 1.0)
        m = b - a
        extra_t = rng.normal(size=(m, 3)) * noise.sigma_t * gain
        extra_r = _random_rotations(rng, noise.sigma_theta * gain, m)
        for k in range(m):
            e = out[a + k]
            if e is None:
                continue
            if isinstance(e, Pose):
                out[a + k] = Pose(e.t + extra_t[k], quat_mul(e.q, quat_exp(extra_r[k])))
            else:
                out[a + k] = RelativePose(e.dt + extra_t[k], quat_mul(e.dq, quat_exp(extra_r[k])))
        return out
    count = int(math.ceil(spec.level * (b - a)))
    if spec.kind == "freeze":
        if a == 0:
            raise SpanOutOfRange("freeze needs a frame before the span")
        for f in range(a, a + count):
            out[f] = out[a - 1]
    else:
        for f in range(a, a + count):
            out[f] = None
    return out


def hold_last(stream: Sequence) -> list:
    """Replace missing entries by the most recent available one."""
    out = list(stream)
    for k in range(1, len(out)):
        if out[k] is None:
            out[k] = out[k - 1]
    return out

