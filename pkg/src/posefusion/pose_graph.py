"""Pose graph optimization over absolute priors and relative constraints.

Each constraint contributes the energy ``r^T S r`` where ``r`` is a 6-vector
tangent residual (translation error, rotation-vector error) and ``S`` is a
diagonal stiffness. The solver linearizes with respect to ``boxplus``
perturbations of every pose, stacks the sqrt-stiffness weighted rows and
solves the (optionally damped) normal equations by Cholesky.

``fuse_streams`` runs the solver over a sliding window to fuse an absolute
pose stream (APR) with the relative deltas between its frames (RPR).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .errors import (
    EmptyGraph,
    IndexOutOfRange,
    SingularSystem,
    SolverError,
    StreamLengthMismatch,
    UnconstrainedPose,
)
from .geometry import (
    Pose,
    RelativePose,
    apply_relative,
    quat_conj,
    quat_exp,
    quat_log,
    quat_mul,
    quat_normalize,
    quat_to_rotmat,
    relative_between,
    rotate,
    skew,
    stack_poses,
)

DEFAULT_APR_STIFFNESS = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
DEFAULT_RPR_STIFFNESS = (100.0, 100.0, 100.0, 100.0, 100.0, 100.0)
_ENERGY_FLOOR = 1e-12


def _stiffness(s) -> np.ndarray:
    s = np.array(s, dtype=float).reshape(-1)
    if s.size == 1:
        s = np.repeat(s, 6)
    if s.shape != (6,):
        raise ValueError(f"stiffness must have 6 components, got {s.shape}")
    if not np.all(np.isfinite(s)) or np.any(s < 0):
        raise ValueError("stiffness components must be finite and >= 0")
    s.flags.writeable = False
    return s


@dataclass(frozen=True, eq=False)
class Constraint:
    """One graph edge.

    An absolute prior has ``j is None`` and a :class:`Pose` target; a
    relative constraint links poses ``i -> j`` with a :class:`RelativePose`
    target measured in the body frame of pose ``i``.
    """

    i: int
    target: Pose | RelativePose
    stiffness: np.ndarray = field(default_factory=lambda: np.ones(6))
    j: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "stiffness", _stiffness(self.stiffness))
        if self.j is None:
            if not isinstance(self.target, Pose):
                raise TypeError("absolute prior needs a Pose target")
        else:
            if not isinstance(self.target, RelativePose):
                raise TypeError("relative constraint needs a RelativePose target")
            if self.i == self.j:
                raise ValueError("relative constraint requires i != j")

    @classmethod
    def prior(cls, i: int, target: Pose, stiffness=DEFAULT_APR_STIFFNESS) -> "Constraint":
        return cls(i, target, stiffness)

    @classmethod
    def relative(cls, i: int, j: int, target: RelativePose, stiffness=DEFAULT_RPR_STIFFNESS) -> "Constraint":
        return cls(i, target, stiffness, j)

    @property
    def kind(self) -> str:
        return "prior" if self.j is None else "relative"

    @property
    def indices(self) -> tuple[int, ...]:
        return (self.i,) if self.j is None else (self.i, self.j)


@dataclass(frozen=True, eq=False)
class PoseGraph:
    poses: tuple
    constraints: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "constraints", tuple(self.constraints))

    def __len__(self):
        return len(self.poses)

    def with_poses(self, poses) -> "PoseGraph":
        return replace(self, poses=tuple(poses))

    def check_indices(self):
        n = len(self.poses)
        for c in self.constraints:
            for k in c.indices:
                if not 0 <= k < n:
                    raise IndexOutOfRange(f"constraint index {k} outside graph of {n} poses")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 100
    step_tol: float = 1e-10
    damping: float = 0.0
    fd_step: float = 1e-6
    jacobian: str = "fd"

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not self.step_tol > 0:
            raise ValueError("step_tol must be > 0")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be > 0")
        if self.jacobian not in ("fd", "analytic"):
            raise ValueError("jacobian must be 'fd' or 'analytic'")


@dataclass(frozen=True)
class FusionConfig:
    window: int = 5
    stride: int = 1
    skip: int = 1
    apr_stiffness: tuple = DEFAULT_APR_STIFFNESS
    rpr_stiffness: tuple = DEFAULT_RPR_STIFFNESS
    drop_repeated: bool = False

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride >= self.window:
            raise ValueError("stride must be smaller than window so every frame is emitted")
        if self.skip < 1:
            raise ValueError("skip must be >= 1")
        _stiffness(self.apr_stiffness)
        _stiffness(self.rpr_stiffness)


@dataclass
class LinearSystem:
    """Stacked weighted system ``J dz ~ r`` with ``r = L^T (k - f(z))``."""

    jacobian: np.ndarray
    residual: np.ndarray
    solution: np.ndarray | None = None

    @property
    def energy(self) -> float:
        return float(self.residual @ self.residual)


class OptimizeResult(NamedTuple):
    graph: PoseGraph
    energies: list
    steps: list



# -- residual kernels on arrays ------------------------------------------------


def _prior_residual(T, Q, Kt, Kq):
    rq = quat_log(quat_mul(quat_conj(Kq), Q))
    rt = np.broadcast_to(T - Kt, rq.shape[:-1] + (3,))
    return np.concatenate([rt, rq], axis=-1)


def _relative_residual(Ti, Qi, Tj, Qj, Kdt, Kdq):
    ci = quat_conj(Qi)
    dt = rotate(ci, Tj - Ti)
    dq = quat_mul(ci, Qj)
    rq = quat_log(quat_mul(quat_conj(Kdq), dq))
    return np.concatenate([np.broadcast_to(dt - Kdt, rq.shape[:-1] + (3,)), rq], axis=-1)


def _signature(g: PoseGraph) -> tuple:
    return (len(g.poses),) + tuple((c.i, c.j, c.stiffness.tobytes()) for c in g.constraints)


class _Batch:
    """A stack of graphs sharing one constraint layout, packed into arrays.

    Every array carries a leading batch axis ``B`` so that one numpy call
    evaluates all graphs at once.
    """

    def __init__(self, graphs: Sequence[PoseGraph]):
        g0 = graphs[0]
        g0.check_indices()
        cons = g0.constraints
        self.B = len(graphs)
        self.n = len(g0.poses)
        self.m = len(cons)
        pr = [k for k, c in enumerate(cons) if c.j is None]
        rl = [k for k, c in enumerate(cons) if c.j is not None]
        self.prior_rows = np.array(pr, dtype=int)
        self.rel_rows = np.array(rl, dtype=int)
        self.p_idx = np.array([cons[k].i for k in pr], dtype=int)
        self.r_i = np.array([cons[k].i for k in rl], dtype=int)
        self.r_j = np.array([cons[k].j for k in rl], dtype=int)
        B, mp, mr = self.B, len(pr), len(rl)
        self.p_Kt = np.array([[g.constraints[k].target.t for k in pr] for g in graphs]).reshape(B, mp, 3)
        self.p_Kq = np.array([[g.constraints[k].target.q for k in pr] for g in graphs]).reshape(B, mp, 4)
        self.r_Kdt = np.array([[g.constraints[k].target.dt for k in rl] for g in graphs]).reshape(B, mr, 3)
        self.r_Kdq = np.array([[g.constraints[k].target.dq for k in rl] for g in graphs]).reshape(B, mr, 4)
        self.W = np.sqrt(np.array([c.stiffness for c in cons]).reshape(self.m, 6))

    def subset(self, idx) -> "_Batch":
        """The same layout restricted to batch members ``idx``."""
        out = copy.copy(self)
        out.B = len(idx)
        for name in ("p_Kt", "p_Kq", "r_Kdt", "r_Kdq"):
            setattr(out, name, getattr(self, name)[idx])
        return out

    def residuals(self, T, Q) -> np.ndarray:
        """Unweighted residuals, shape ``(B, m, 6)`` in constraint order."""
        r = np.empty((self.B, self.m, 6))
        if self.prior_rows.size:
            r[:, self.prior_rows] = _prior_residual(T[:, self.p_idx], Q[:, self.p_idx], self.p_Kt, self.p_Kq)
        if self.rel_rows.size:
            r[:, self.rel_rows] = _relative_residual(
                T[:, self.r_i], Q[:, self.r_i], T[:, self.r_j], Q[:, self.r_j], self.r_Kdt, self.r_Kdq
            )
        return r

    def energy(self, r) -> np.ndarray:
        return np.sum((self.W * r) ** 2, axis=(1, 2))

    def fd_blocks(self, T, Q, h):
        """Residual Jacobians per constraint, rotation columns by central differences.

        Both residuals are linear in a translation perturbation ``t + d``, so
        the translation columns are filled in exactly (``I`` for priors,
        ``-/+ R_i^T`` for relative constraints).
        Returns ``(prior (B, mp, 6, 6), rel_i (B, mr, 6, 6), rel_j (B, mr, 6, 6))``.
        """
        dq = quat_exp(np.concatenate([np.eye(3) * h, -np.eye(3) * h]))  # (6, 4)
        B = self.B
        Jp = np.zeros((B, len(self.p_idx), 6, 6))
        Ji = np.zeros((B, len(self.r_i), 6, 6))
        Jj = np.zeros((B, len(self.r_i), 6, 6))
        if self.prior_rows.size:
            Qp = quat_mul(Q[:, self.p_idx, None], dq)
            r = _prior_residual(T[:, self.p_idx, None], Qp, self.p_Kt[:, :, None], self.p_Kq[:, :, None])
            Jp[..., :3, :3] = np.eye(3)
            Jp[..., :, 3:] = np.swapaxes((r[:, :, :3] - r[:, :, 3:]) / (2 * h), 2, 3)
        if self.rel_rows.size:
            Ti, Qi = T[:, self.r_i, None], Q[:, self.r_i, None]
            Tj, Qj = T[:, self.r_j, None], Q[:, self.r_j, None]
            ones = np.ones((1, 1, 6, 1))
            r = _relative_residual(
                Ti,
                np.concatenate([quat_mul(Qi, dq), Qi * ones], axis=2),
                Tj,
                np.concatenate([Qj * ones, quat_mul(Qj, dq)], axis=2),
                self.r_Kdt[:, :, None],
                self.r_Kdq[:, :, None],
            )
            Ri_T = np.swapaxes(quat_to_rotmat(Q[:, self.r_i]), -1, -2)
            Ji[..., :3, :3] = -Ri_T
            Jj[..., :3, :3] = Ri_T
            Ji[..., :, 3:] = np.swapaxes((r[:, :, 0:3] - r[:, :, 3:6]) / (2 * h), 2, 3)
            Jj[..., :, 3:] = np.swapaxes((r[:, :, 6:9] - r[:, :, 9:12]) / (2 * h), 2, 3)
        return Jp, Ji, Jj

    def analytic_blocks(self, T, Q):
        B = self.B
        Qp = Q[:, self.p_idx]
        Jp = np.zeros((B, len(self.p_idx), 6, 6))
        Jp[..., :3, :3] = np.eye(3)
        Jp[..., 3:, 3:] = right_jacobian_inv(quat_log(quat_mul(quat_conj(self.p_Kq), Qp)))
        Ti, Qi, Tj, Qj = T[:, self.r_i], Q[:, self.r_i], T[:, self.r_j], Q[:, self.r_j]
        Ri_T = np.swapaxes(quat_to_rotmat(Qi), -1, -2)
        dt = np.einsum("...ab,...b->...a", Ri_T, Tj - Ti)
        D = quat_mul(quat_conj(Qi), Qj)
        Jinv = right_jacobian_inv(quat_log(quat_mul(quat_conj(self.r_Kdq), D)))
        Ji = np.zeros((B, len(self.r_i), 6, 6))
        Jj = np.zeros((B, len(self.r_i), 6, 6))
        Ji[..., :3, :3] = -Ri_T
        Ji[..., :3, 3:] = skew(dt)
        Ji[..., 3:, 3:] = -Jinv @ np.swapaxes(quat_to_rotmat(D), -1, -2)
        Jj[..., :3, :3] = Ri_T
        Jj[..., 3:, 3:] = Jinv
        return Jp, Ji, Jj

    def assemble(self, r, blocks):
        """Weighted Jacobians ``(B, 6m, 6n)`` and right-hand sides ``(B, 6m)``."""
        Jp, Ji, Jj = blocks
        J = np.zeros((self.B, self.m, self.n, 6, 6))
        if self.prior_rows.size:
            J[:, self.prior_rows, self.p_idx] = Jp
        if self.rel_rows.size:
            J[:, self.rel_rows, self.r_i] += Ji
            J[:, self.rel_rows, self.r_j] += Jj
        J = J.transpose(0, 1, 3, 2, 4).reshape(self.B, 6 * self.m, 6 * self.n)
        w = self.W.reshape(-1)
        J *= w[:, None]
        return J, -(w * r.reshape(self.B, -1))


def right_jacobian_inv(phi) -> np.ndarray:
    """Inverse right Jacobian of SO(3) at rotation vector ``phi``; batched over leading axes."""
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    W = skew(phi)
    small = theta < 1e-5
    ts = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta**2 / 720.0,
        1.0 / ts**2 - (1.0 + np.cos(ts)) / (2.0 * ts * np.sin(ts)),
    )
    return np.eye(3) + 0.5 * W + c[..., None, None] * (W @ W)


# -- public operations ---------------------------------------------------------


def constraint_residual(g: PoseGraph, c: Constraint) -> np.ndarray:
    n = len(g.poses)
    for k in c.indices:
        if not 0 <= k < n:
            raise IndexOutOfRange(f"constraint index {k} outside graph of {n} poses")
    if c.j is None:
        p = g.poses[c.i]
        return _prior_residual(p.t, p.q, c.target.t, c.target.q)
    a, b = g.poses[c.i], g.poses[c.j]
    return _relative_residual(a.t, a.q, b.t, b.q, c.target.dt, c.target.dq)


def constraint_energy(g: PoseGraph, c: Constraint) -> float:
    r = constraint_residual(g, c)
    return float(r @ (c.stiffness * r))


def total_energy(g: PoseGraph) -> float:
    return sum(constraint_energy(g, c) for c in g.constraints)


def _stacked(graphs):
    T, Q = zip(*(stack_poses(g.poses) for g in graphs))
    return np.stack(T), np.stack(Q)


def _blocks(batch: _Batch, T, Q, cfg: SolverConfig):
    if cfg.jacobian == "analytic":
        return batch.analytic_blocks(T, Q)
    return batch.fd_blocks(T, Q, cfg.fd_step)


def linearize(g: PoseGraph, cfg: SolverConfig = SolverConfig()) -> LinearSystem:
    if not g.constraints:
        raise EmptyGraph("graph has no constraints")
    batch = _Batch([g])
    T, Q = _stacked([g])
    J, r = batch.assemble(batch.residuals(T, Q), _blocks(batch, T, Q, cfg))
    return LinearSystem(J[0], r[0])


def _check_factor(L, A):
    diag = np.diagonal(L, axis1=-2, axis2=-1) ** 2
    scale = np.maximum(np.max(np.diagonal(A, axis1=-2, axis2=-1), axis=-1), 1e-300)
    return np.min(diag, axis=-1) >= 1e-13 * scale


def solve_normal_equations(s: LinearSystem, damping: float = 0.0) -> np.ndarray:
    """Minimize ``|J dz - r|^2 + damping |dz|^2`` via Cholesky."""
    J, r = s.jacobian, s.residual
    A = J.T @ J
    if damping:
        A = A + damping * np.eye(A.shape[0])
    b = J.T @ r
    try:
        c, low = cho_factor(A, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise SingularSystem(f"normal equations not positive definite: {exc}") from None
    if not _check_factor(np.tril(c), A):
        raise SingularSystem("normal equations numerically singular (under-constrained graph)")
    dz = cho_solve((c, low), b)
    s.solution = dz
    return dz


def _batched_solve(A, b):
    """Cholesky solve of ``A x = b`` for a stack of SPD systems.

    Raises :class:`SingularSystem` carrying ``batch_index`` of the first
    system that cannot be factored.
    """
    try:
        L = np.linalg.cholesky(A)
        ok = _check_factor(L, A) & np.all(np.isfinite(L), axis=(1, 2))
    except np.linalg.LinAlgError:
        L = None
        ok = np.zeros(len(A), dtype=bool)
        for k in range(len(A)):
            try:
                Lk = np.linalg.cholesky(A[k])
            except np.linalg.LinAlgError:
                continue
            ok[k] = bool(_check_factor(Lk, A[k]))
    if not np.all(ok):
        exc = SingularSystem("normal equations numerically singular (under-constrained graph)")
        exc.batch_index = int(np.flatnonzero(~ok)[0])
        raise exc
    # the factor only certifies definiteness; one batched LU solve is cheaper
    # than two general solves against the triangular factors
    return np.linalg.solve(A, b[..., None])[..., 0]


def unconstrained_poses(g: PoseGraph) -> list[int]:
    """Poses in connected components that contain no absolute prior."""
    n = len(g.poses)
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    anchored = set()
    for c in g.constraints:
        if c.j is not None and np.all(c.stiffness > 0):
            parent[find(c.i)] = find(c.j)
    for c in g.constraints:
        if c.j is None and np.all(c.stiffness > 0):
            anchored.add(c.i)
    roots = {find(a) for a in anchored}
    return [k for k in range(n) if find(k) not in roots]


def _optimize_arrays(graphs: Sequence[PoseGraph], cfg: SolverConfig):
    """Run :func:`optimize` on graphs that share one constraint layout.

    Damping, acceptance and convergence are tracked per graph; the arrays
    are simply evaluated together. Returns ``(T, Q, energies, steps)`` with
    ``T`` of shape ``(B, n, 3)`` and ``Q`` of shape ``(B, n, 4)``.
    """
    batch = _Batch(graphs)
    B, N = batch.B, 6 * batch.n
    T, Q = _stacked(graphs)
    r = batch.residuals(T, Q)
    energy = batch.energy(r)
    energies = [[float(e)] for e in energy]
    steps: list[list[float]] = [[] for _ in range(B)]
    lam = np.full(B, cfg.damping)
    active = np.ones(B, dtype=bool)
    eye = np.eye(N)
    for _ in range(cfg.max_iters):
        # only unconverged graphs are evaluated
        idx = np.flatnonzero(active)
        if not idx.size:
            break
        sub = batch if idx.size == B else batch.subset(idx)
        Ta, Qa, la, ea = T[idx], Q[idx], lam[idx], energy[idx]
        J, rhs = sub.assemble(r[idx], _blocks(sub, Ta, Qa, cfg))
        Jt = np.swapaxes(J, 1, 2)
        A0 = Jt @ J
        try:
            dz = _batched_solve(A0 + la[:, None, None] * eye, (Jt @ rhs[..., None])[..., 0])
        except SingularSystem as exc:
            exc.batch_index = int(idx[exc.batch_index])
            raise
        step = np.max(np.abs(dz), axis=1) if N else np.zeros(idx.size)
        for k, st in zip(idx, step):
            steps[k].append(float(st))
        moving = step > cfg.step_tol
        d = dz.reshape(idx.size, batch.n, 6)
        T_new = Ta + d[..., :3]
        Q_new = quat_normalize(quat_mul(Qa, quat_exp(d[..., 3:])))
        r_new = sub.residuals(T_new, Q_new)
        e_new = sub.energy(r_new)
        accept = moving & (e_new <= ea)
        stalled = moving & ~accept & (e_new - ea <= _ENERGY_FLOOR * ea)
        reject = moving & ~accept & ~stalled
        T[idx[accept]] = T_new[accept]
        Q[idx[accept]] = Q_new[accept]
        r[idx[accept]] = r_new[accept]
        energy[idx[accept]] = e_new[accept]
        for k in idx[accept]:
            energies[k].append(float(energy[k]))
        la = np.where(accept & (la > cfg.damping), np.maximum(cfg.damping, 0.5 * la), la)
        diag = np.max(np.diagonal(A0, axis1=1, axis2=2), axis=1)
        lam[idx] = np.where(reject, np.maximum(2.0 * la, 1e-8 * np.maximum(diag, 1.0)), la)
        # a step no longer resolvable in floating point counts as converged
        active[idx] = moving & ~stalled
    return T, Q, energies, steps


def _optimize_batch(graphs: Sequence[PoseGraph], cfg: SolverConfig) -> list[OptimizeResult]:
    T, Q, energies, steps = _optimize_arrays(graphs, cfg)
    return [
        OptimizeResult(g.with_poses([Pose(t, q) for t, q in zip(T[k], Q[k])]), energies[k], steps[k])
        for k, g in enumerate(graphs)
    ]


def optimize(g: PoseGraph, cfg: SolverConfig = SolverConfig()) -> OptimizeResult:
    """Gauss-Newton on the manifold with Levenberg damping doubled on rejection.

    Returns the optimized graph, the total energy after every accepted
    iteration (entry 0 is the initial energy) and the ``|dz|_inf`` of each
    solved step.
    """
    if not g.constraints:
        raise EmptyGraph("graph has no constraints")
    g.check_indices()
    free = unconstrained_poses(g)
    if free:
        raise UnconstrainedPose(free)
    return _optimize_batch([g], cfg)[0]


# -- windowed fusion -----------------------------------------------------------


@dataclass
class WindowStats:
    start: int
    energy_before: float
    energy_after: float
    iterations: int


def _window_starts(n: int, window: int, stride: int) -> list[int]:
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def _compose(deltas) -> RelativePose | None:
    if any(d is None for d in deltas):
        return None
    acc = Pose.identity()
    for d in deltas:
        acc = apply_relative(acc, d)
    return RelativePose(acc.t, acc.q)


def _inverse(d: RelativePose) -> RelativePose:
    qi = quat_conj(d.dq)
    return RelativePose(-rotate(qi, d.dt), qi)


def drop_repeated(apr: Sequence[Pose | None]) -> list[Pose | None]:
    """Replace APR entries identical to the previous available one by ``None``.

    A bit-identical repeat of an absolute measurement is a stale value
    (a frozen sensor), not independent evidence.
    """
    out: list[Pose | None] = []
    last = None
    for p in apr:
        if p is not None and last is not None and np.array_equal(p.t, last.t) and np.array_equal(p.q, last.q):
            out.append(None)
        else:
            out.append(p)
        if p is not None:
            last = p
    return out


def _window_graph(apr, rpr, composed, s, cfg: FusionConfig, fused):
    """Constraints and initial poses for the window starting at ``s``.

    Frames without an APR value that were already fused by an earlier
    window carry that estimate over as a prior. ``None`` entries in the
    returned ``init`` mark frames the relative chain cannot reach.
    """
    frames = range(s, s + cfg.window)
    anchors = [apr[f] if apr[f] is not None else fused[f] for f in frames]
    cons = [Constraint.prior(k, p, cfg.apr_stiffness) for k, p in enumerate(anchors) if p is not None]
    for f in frames:
        if f + cfg.skip < s + cfg.window and composed[f] is not None:
            cons.append(Constraint.relative(f - s, f + cfg.skip - s, composed[f], cfg.rpr_stiffness))

    init: list[Pose | None] = list(anchors)
    for k in range(1, cfg.window):
        if init[k] is None and init[k - 1] is not None:
            d = rpr[s + k - 1]
            init[k] = init[k - 1] if d is None else apply_relative(init[k - 1], d)
    for k in range(cfg.window - 2, -1, -1):
        if init[k] is None and init[k + 1] is not None:
            d = rpr[s + k]
            init[k] = init[k + 1] if d is None else apply_relative(init[k + 1], _inverse(d))
    return init, cons


def fuse_streams_with_stats(
    apr: Sequence[Pose | None],
    rpr: Sequence[RelativePose | None],
    cfg: FusionConfig = FusionConfig(),
    scfg: SolverConfig = SolverConfig(),
) -> tuple[list[Pose], list[WindowStats]]:
    """Sliding-window fusion; see :func:`fuse_streams`.

    Also returns per-window energies before and after optimization.
    """
    n = len(apr)
    if len(rpr) != n - 1:
        raise StreamLengthMismatch(f"expected {n - 1} relative poses for {n} absolute poses, got {len(rpr)}")
    if n < cfg.window:
        raise StreamLengthMismatch(f"stream of {n} frames shorter than window {cfg.window}")

    if cfg.drop_repeated:
        apr = drop_repeated(apr)
    starts = _window_starts(n, cfg.window, cfg.stride)
    if cfg.skip == 1:
        composed = list(rpr) + [None]
    else:
        composed = [_compose(rpr[f : f + cfg.skip]) if f + cfg.skip < n else None for f in range(n)]
    fused: list[Pose | None] = [None] * n

    def checked_graph(w):
        init, cons = _window_graph(apr, rpr, composed, starts[w], cfg, fused)
        graph = PoseGraph([p if p is not None else Pose.identity() for p in init], cons)
        free = unconstrained_poses(graph)
        missing = [k for k, p in enumerate(init) if p is None]
        if free or missing:
            s = starts[w]
            raise UnconstrainedPose(sorted({s + k for k in free + missing}), window=w)
        return graph

    # Windows with a complete APR stretch do not depend on earlier output, so
    # they are solved together, one batch per constraint layout. Windows with
    # gaps wait for the fused poses they carry over.
    results: dict[int, tuple] = {}
    groups: dict[tuple, list[tuple[int, PoseGraph]]] = {}
    deferred = set()
    for w, s in enumerate(starts):
        if any(apr[f] is None for f in range(s, s + cfg.window)):
            deferred.add(w)
            continue
        graph = checked_graph(w)
        groups.setdefault(_signature(graph), []).append((w, graph))
    for members in groups.values():
        try:
            T, Q, energies, steps = _optimize_arrays([g for _, g in members], scfg)
        except SolverError as exc:
            exc.window = members[getattr(exc, "batch_index", 0)][0]
            raise
        for k, (w, _) in enumerate(members):
            results[w] = (T[k], Q[k], energies[k], steps[k])

    stats = []
    emitted = 0
    for w, s in enumerate(starts):
        if w in deferred:
            try:
                T, Q, energies, steps = _optimize_arrays([checked_graph(w)], scfg)
            except SolverError as exc:
                exc.window = w
                raise
            results[w] = (T[0], Q[0], energies[0], steps[0])
        T, Q, energies, steps = results.pop(w)
        stats.append(WindowStats(s, energies[0], energies[-1], len(steps)))
        for f in range(max(emitted, s), s + cfg.window):
            fused[f] = Pose(T[f - s], Q[f - s])
        emitted = s + cfg.window
    return list(fused), stats


def fuse_streams(
    apr: Sequence[Pose | None],
    rpr: Sequence[RelativePose | None],
    cfg: FusionConfig = FusionConfig(),
    scfg: SolverConfig = SolverConfig(),
) -> list[Pose]:
    """Fuse absolute and relative pose streams with a causal sliding window.

    For every window of ``cfg.window`` frames a pose graph is built with one
    absolute prior per available APR frame and one relative constraint per
    frame pair ``(f, f + skip)``; it is initialized at the APR poses and
    optimized. The first window emits all its frames, later windows emit only
    the frames not yet emitted (the newest ones). Missing APR entries
    (``None``) drop their priors and are bridged by the relative chain; a
    missing frame that an earlier window already fused keeps that estimate as
    its prior. With ``cfg.drop_repeated`` exact repeats of the previous APR
    value count as missing too.
    """
    return fuse_streams_with_stats(apr, rpr, cfg, scfg)[0]
