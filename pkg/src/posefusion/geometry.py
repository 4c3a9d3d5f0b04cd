"""Rigid-body pose algebra.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays. The low-level
helpers (``quat_mul``, ``quat_exp``, ``quat_log`` ...) broadcast over
leading axes so the solver can evaluate many perturbations at once; the
dataclasses wrap single poses for the public API.

Conventions
-----------
* ``relative_between(a, b)`` is expressed in the body frame of ``a``:
  ``dt = R(a.q)^T (b.t - a.t)`` and ``dq = a.q^-1 * b.q``.
* ``boxplus`` is the right (local) perturbation:
  ``t' = t + dt`` and ``q' = q * Exp(dtheta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ZeroQuaternion

_SMALL_ANGLE = 1e-8
_UNIT_SLACK = 8 * np.finfo(float).eps


def canonicalize(q: np.ndarray) -> np.ndarray:
    """Flip quaternions into the ``w >= 0`` hemisphere.

    Ties at ``w == 0`` are broken by the first nonzero of x, y, z, which
    must end up nonnegative.
    """
    q = np.asarray(q, dtype=float)
    key = q[..., 0].copy()
    for k in (1, 2, 3):
        undecided = key == 0.0
        key = np.where(undecided, q[..., k], key)
    return np.where((key < 0.0)[..., None], -q, q)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1)
    if np.any(~(n > 1e-12)):
        raise ZeroQuaternion(f"cannot normalize quaternion {q!r}")
    # already unit to rounding: leave untouched so normalization is idempotent
    n = np.where(np.abs(n - 1.0) <= _UNIT_SLACK, 1.0, n)
    return canonicalize(q / n[..., None])


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = aw * bw - ax * bx - ay * by - az * bz
    out[..., 1] = aw * bx + ax * bw + ay * bz - az * by
    out[..., 2] = aw * by - ax * bz + ay * bw + az * bx
    out[..., 3] = aw * bz + ax * by - ay * bx + az * bw
    return out


def quat_exp(rotvec: np.ndarray) -> np.ndarray:
    """Map a rotation vector to a unit quaternion."""
    v = np.asarray(rotvec, dtype=float)
    theta = np.linalg.norm(v, axis=-1)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    w = np.where(small, 1.0 - theta**2 / 8.0, np.cos(0.5 * safe))
    k = np.where(small, 0.5 - theta**2 / 48.0, np.sin(0.5 * safe) / safe)
    return np.concatenate([w[..., None], v * k[..., None]], axis=-1)


def quat_log(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion, angle in ``[0, pi]``."""
    q = np.asarray(q, dtype=float)
    q = np.where((q[..., :1] < 0.0), -q, q)
    w = q[..., 0]
    v = q[..., 1:]
    n = np.linalg.norm(v, axis=-1)
    small = n < 1e-12
    angle = 2.0 * np.arctan2(n, w)
    k = np.where(small, 2.0 / np.where(w == 0.0, 1.0, w), angle / np.where(small, 1.0, n))
    return v * k[..., None]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return R.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns a canonical unit quaternion."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    m = np.array([tr, R[0, 0], R[1, 1], R[2, 2]])
    i = int(np.argmax(m))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(q)


def _cross(a, b):
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors ``v`` by quaternions ``q`` (broadcasting)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    u = q[..., 1:]
    w = q[..., :1]
    uv = _cross(u, v)
    return v + 2.0 * (w * uv + _cross(u, uv))


def skew(v) -> np.ndarray:
    """Cross-product matrix; leading dimensions are broadcast."""
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1], S[..., 0, 2] = -z, y
    S[..., 1, 0], S[..., 1, 2] = z, -x
    S[..., 2, 0], S[..., 2, 1] = -y, x
    return S


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


def _vec3(v, name: str) -> np.ndarray:
    v = np.array(v, dtype=float).reshape(-1)
    if v.shape != (3,):
        raise ValueError(f"{name} must have 3 components, got {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    v.flags.writeable = False
    return v


def _unit_quat(q) -> np.ndarray:
    # scalar path of quat_normalize; poses are built in hot loops
    q = np.array(q, dtype=float).reshape(-1)
    if q.shape != (4,) or not np.isfinite(q).all():
        raise ValueError(f"quaternion must be 4 finite components, got {q!r}")
    w, x, y, z = q.tolist()
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if not n > 1e-12:
        raise ZeroQuaternion(f"cannot normalize quaternion {q!r}")
    if abs(n - 1.0) <= _UNIT_SLACK:
        n = 1.0
    key = next((c for c in (w, x, y, z) if c != 0.0), 0.0)
    q /= n
    if key < 0.0:
        q = -q
    q.flags.writeable = False
    return q


@dataclass(frozen=True, eq=False)
class Pose:
    """Absolute 6DoF pose: translation ``t`` and unit quaternion ``q`` (w first)."""

    t: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t", _vec3(self.t, "t"))
        object.__setattr__(self, "q", _unit_quat(self.q))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_vector(cls, v) -> "Pose":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:7])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotmat(self.q)

    def __repr__(self):
        return f"Pose(t={self.t.tolist()}, q={self.q.tolist()})"


@dataclass(frozen=True, eq=False)
class RelativePose:
    """Pose delta expressed in the body frame of the earlier pose."""

    dt: np.ndarray
    dq: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", _vec3(self.dt, "dt"))
        object.__setattr__(self, "dq", _unit_quat(self.dq))

    @classmethod
    def identity(cls) -> "RelativePose":
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dt, self.dq])

    def __repr__(self):
        return f"RelativePose(dt={self.dt.tolist()}, dq={self.dq.tolist()})"


@dataclass(frozen=True, eq=False)
class LiteralPoseDiff:
    """Component-wise difference ``(t_i - t_j, q_i - q_j)``.

    Not a group element: ``dq4`` is a raw 4-vector without a norm
    constraint. Only the MapNet-style pairwise loss uses it.
    """

    dt: np.ndarray
    dq4: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", _vec3(self.dt, "dt"))
        dq4 = np.array(self.dq4, dtype=float).reshape(-1)
        if dq4.shape != (4,) or not np.all(np.isfinite(dq4)):
            raise ValueError("dq4 must be 4 finite components")
        object.__setattr__(self, "dq4", _frozen(dq4))

    @classmethod
    def between(cls, a: Pose, b: Pose) -> "LiteralPoseDiff":
        return cls(a.t - b.t, a.q - b.q)


@dataclass(frozen=True, eq=False)
class TangentDelta:
    """Per-pose tangent increment: translation ``dt`` and rotation vector ``dtheta``.

    Rotation vectors longer than pi are wrapped onto the equivalent
    shorter rotation.
    """

    dt: np.ndarray
    dtheta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dt", _vec3(self.dt, "dt"))
        th = np.array(self.dtheta, dtype=float).reshape(-1)
        th = _vec3(th, "dtheta")
        angle = np.linalg.norm(th)
        if angle > np.pi:
            wrapped = angle - 2.0 * np.pi * np.floor((angle + np.pi) / (2.0 * np.pi))
            th = _frozen(th * (wrapped / angle))
        object.__setattr__(self, "dtheta", th)

    @classmethod
    def from_vector(cls, v) -> "TangentDelta":
        v = np.asarray(v, dtype=float)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.dt, self.dtheta])


def relative_between(a: Pose, b: Pose) -> RelativePose:
    dt = rotate(quat_conj(a.q), b.t - a.t)
    dq = quat_mul(quat_conj(a.q), b.q)
    return RelativePose(dt, dq)


def apply_relative(a: Pose, d: RelativePose) -> Pose:
    return Pose(a.t + rotate(a.q, d.dt), quat_mul(a.q, d.dq))


def boxplus(p: Pose, d) -> Pose:
    if not isinstance(d, TangentDelta):
        d = TangentDelta.from_vector(d)
    return Pose(p.t + d.dt, quat_mul(p.q, quat_exp(d.dtheta)))


def quat_angle(a, b) -> float:
    """Geodesic angle in radians between two unit quaternions, sign-agnostic.

    Uses ``atan2`` on the relative quaternion rather than ``acos`` of the dot
    product, which loses about half the digits near zero.
    """
    r = quat_mul(quat_conj(np.asarray(a, dtype=float)), np.asarray(b, dtype=float))
    return 2.0 * math.atan2(float(np.linalg.norm(r[1:])), abs(float(r[0])))


def _cross3(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


def integrate(start: Pose, deltas) -> list[Pose]:
    """Chain relative poses from ``start``; returns ``len(deltas) + 1`` poses.

    Same operations, in the same order, as repeated :func:`apply_relative`,
    on Python floats to skip per-step array overhead.
    """
    out = [start]
    for d in deltas:
        p = out[-1]
        tx, ty, tz = p.t.tolist()
        aw, ax, ay, az = p.q.tolist()
        v = d.dt.tolist()
        bw, bx, by, bz = d.dq.tolist()
        u = (ax, ay, az)
        uv = _cross3(u, v)
        uuv = _cross3(u, uv)
        r = [v[k] + 2.0 * (aw * uv[k] + uuv[k]) for k in range(3)]
        q = (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
        out.append(Pose((tx + r[0], ty + r[1], tz + r[2]), q))
    return out


def stack_poses(poses) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(T, Q)`` arrays of shape ``(n, 3)`` and ``(n, 4)``."""
    T = np.array([p.t for p in poses], dtype=float).reshape(-1, 3)
    Q = np.array([p.q for p in poses], dtype=float).reshape(-1, 4)
    return T, Q
