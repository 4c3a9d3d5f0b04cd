import numpy as np
import pytest

from posefusion.errors import (
    EmptyGraph,
    IndexOutOfRange,
    SingularSystem,
    StreamLengthMismatch,
    UnconstrainedPose,
)
from posefusion.geometry import (
    Pose,
    RelativePose,
    apply_relative,
    boxplus,
    integrate,
    quat_exp,
    quat_normalize,
    relative_between,
)
from posefusion.pose_graph import (
    Constraint,
    FusionConfig,
    LinearSystem,
    PoseGraph,
    SolverConfig,
    constraint_energy,
    constraint_residual,
    drop_repeated,
    fuse_streams,
    fuse_streams_with_stats,
    linearize,
    optimize,
    solve_normal_equations,
    total_energy,
    unconstrained_poses,
)


def random_pose(rng, scale=3.0):
    return Pose(rng.normal(size=3) * scale, quat_normalize(rng.normal(size=4)))


def noiseless_chain(rng, n):
    """Ground-truth poses with consistent priors on every frame and relative edges."""
    gt = [random_pose(rng)]
    for _ in range(n - 1):
        d = RelativePose(rng.normal(size=3) * 0.3, quat_exp(rng.normal(size=3) * 0.2))
        gt.append(apply_relative(gt[-1], d))
    cons = [Constraint.prior(k, p) for k, p in enumerate(gt)]
    cons += [Constraint.relative(k, k + 1, relative_between(gt[k], gt[k + 1])) for k in range(n - 1)]
    return gt, cons


def line(x):
    return Pose([x, 0.0, 0.0], [1, 0, 0, 0])


def max_pose_error(a, b):
    return max(max(np.abs(p.t - q.t).max(), np.abs(p.q - q.q).max()) for p, q in zip(a, b))


class TestConstraints:
    def test_rejects_negative_stiffness(self):
        with pytest.raises(ValueError):
            Constraint.prior(0, Pose.identity(), [-1, 1, 1, 1, 1, 1])

    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            Constraint.relative(1, 1, RelativePose.identity())

    def test_rejects_wrong_target_type(self):
        with pytest.raises(TypeError):
            Constraint(0, RelativePose.identity())

    def test_scalar_stiffness_broadcasts(self):
        np.testing.assert_array_equal(Constraint.prior(0, Pose.identity(), 4.0).stiffness, np.full(6, 4.0))


class TestResidualAndEnergy:
    def test_state_at_target_is_zero(self):
        p = Pose([1, 2, 3], quat_normalize([1, 2, 3, 4]))
        g = PoseGraph([p], [Constraint.prior(0, p)])
        np.testing.assert_array_equal(constraint_residual(g, g.constraints[0]), np.zeros(6))

    def test_prior_translation_offset(self):
        g = PoseGraph([line(1.0)], [Constraint.prior(0, Pose.identity())])
        np.testing.assert_array_equal(constraint_residual(g, g.constraints[0]), [1, 0, 0, 0, 0, 0])
        assert constraint_energy(g, g.constraints[0]) == 1.0

    def test_energy_arithmetic(self):
        g = PoseGraph([Pose([1, 1, 0], [1, 0, 0, 0])], [Constraint.prior(0, Pose.identity(), 4.0)])
        assert constraint_energy(g, g.constraints[0]) == 8.0
        assert total_energy(g) == 8.0

    def test_index_out_of_range(self):
        g = PoseGraph([Pose.identity()], [Constraint.prior(3, Pose.identity())])
        with pytest.raises(IndexOutOfRange):
            constraint_residual(g, g.constraints[0])

    def test_boxplus_correction_zeroes_prior_residual(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p, k = random_pose(rng), random_pose(rng)
            g = PoseGraph([p], [Constraint.prior(0, k)])
            r = constraint_residual(g, g.constraints[0])
            fixed = g.with_poses([boxplus(p, np.r_[-r[:3], 0, 0, 0])])
            fixed = fixed.with_poses([Pose(fixed.poses[0].t, k.q)])
            np.testing.assert_allclose(constraint_residual(fixed, fixed.constraints[0]), 0, atol=1e-12)

    def test_relative_residual_corrected_by_moving_j(self):
        rng = np.random.default_rng(1)
        a, b = random_pose(rng), random_pose(rng)
        target = RelativePose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))
        c = Constraint.relative(0, 1, target)
        g = PoseGraph([a, apply_relative(a, target)], [c])
        np.testing.assert_allclose(constraint_residual(g, c), 0, atol=1e-12)
        g2 = PoseGraph([a, b], [c])
        assert np.linalg.norm(constraint_residual(g2, c)) > 0.1


class TestLinearize:
    def test_single_prior_at_target(self):
        p = Pose([1, 2, 3], quat_normalize([1, -1, 2, 0.5]))
        s = linearize(PoseGraph([p], [Constraint.prior(0, p)]))
        np.testing.assert_allclose(s.residual, 0, atol=1e-15)
        np.testing.assert_allclose(s.jacobian, np.eye(6), atol=1e-8)

    def test_zero_stiffness_rows_vanish(self):
        p = Pose.identity()
        g = PoseGraph([p, line(1.0)], [Constraint.prior(0, p), Constraint.relative(0, 1, RelativePose.identity(), 0.0)])
        J = linearize(g).jacobian
        assert J.shape == (12, 12)
        np.testing.assert_array_equal(J[6:], 0)

    def test_empty_graph(self):
        with pytest.raises(EmptyGraph):
            linearize(PoseGraph([Pose.identity()], []))

    def test_columns_are_six_per_pose(self):
        rng = np.random.default_rng(2)
        _, cons = noiseless_chain(rng, 4)
        s = linearize(PoseGraph([random_pose(rng) for _ in range(4)], cons))
        assert s.jacobian.shape == (6 * len(cons), 24)
        assert np.all(np.isfinite(s.jacobian))

    def test_richardson_step_halving(self):
        rng = np.random.default_rng(3)
        gt, cons = noiseless_chain(rng, 3)
        g = PoseGraph([boxplus(p, rng.normal(size=6) * 0.3) for p in gt], cons)
        J1, J2, J4 = (linearize(g, SolverConfig(fd_step=h)).jacobian for h in (4e-2, 2e-2, 1e-2))
        ratio = np.abs(J1 - J2).max() / np.abs(J2 - J4).max()
        assert ratio == pytest.approx(4.0, rel=0.05)

    def test_fd_matches_analytic(self):
        rng = np.random.default_rng(4)
        for n in (2, 5, 9):
            gt, cons = noiseless_chain(rng, n)
            g = PoseGraph([boxplus(p, rng.normal(size=6) * 0.5) for p in gt], cons)
            fd = linearize(g, SolverConfig(jacobian="fd")).jacobian
            an = linearize(g, SolverConfig(jacobian="analytic")).jacobian
            assert np.abs(fd - an).max() < 1e-5

    def test_residual_is_weighted_negative_error(self):
        g = PoseGraph([line(1.0)], [Constraint.prior(0, Pose.identity(), 9.0)])
        np.testing.assert_allclose(linearize(g).residual, [-3, 0, 0, 0, 0, 0])


class TestSolveNormalEquations:
    def test_identity_jacobian(self):
        r = np.full(6, 0.5)
        np.testing.assert_allclose(solve_normal_equations(LinearSystem(np.eye(6), r)), r)

    def test_midpoint(self):
        s = LinearSystem(np.array([[1.0], [1.0]]), np.array([0.0, 2.0]))
        np.testing.assert_allclose(solve_normal_equations(s), [1.0])

    def test_weighted_midpoint(self):
        w = np.sqrt([1.0, 3.0])
        s = LinearSystem(w[:, None], w * np.array([0.0, 2.0]))
        np.testing.assert_allclose(solve_normal_equations(s), [1.5])

    def test_matches_lstsq(self):
        rng = np.random.default_rng(5)
        J, r = rng.normal(size=(20, 6)), rng.normal(size=20)
        s = LinearSystem(J, r)
        np.testing.assert_allclose(solve_normal_equations(s), np.linalg.lstsq(J, r, rcond=None)[0], atol=1e-12)
        assert s.solution is not None

    def test_damping(self):
        J, r = np.eye(2), np.array([1.0, 2.0])
        np.testing.assert_allclose(solve_normal_equations(LinearSystem(J, r), damping=1.0), r / 2)

    def test_singular(self):
        with pytest.raises(SingularSystem):
            solve_normal_equations(LinearSystem(np.zeros((3, 2)), np.ones(3)))


class TestOptimize:
    def test_fixed_point(self):
        rng = np.random.default_rng(6)
        gt, cons = noiseless_chain(rng, 8)
        res = optimize(PoseGraph(gt, cons))
        assert res.steps[0] <= 1e-10
        assert res.energies[-1] < 1e-12
        assert max_pose_error(res.graph.poses, gt) < 1e-12

    def test_stiff_two_pose_line(self):
        g = PoseGraph(
            [line(0.0), line(2.0)],
            [Constraint.prior(0, line(0.0)), Constraint.prior(1, line(2.0)),
             Constraint.relative(0, 1, RelativePose([1, 0, 0], [1, 0, 0, 0]), 1e6)],
        )
        res = optimize(g)
        assert res.graph.poses[0].t[0] == pytest.approx(0.5, abs=1e-3)
        assert res.graph.poses[1].t[0] == pytest.approx(1.5, abs=1e-3)

    def test_two_pose_line_matches_lstsq(self):
        # finite stiffness: the translation problem is linear, lstsq is exact
        A = np.array([[1.0, 0.0], [0.0, 1.0], [-1e3, 1e3]])
        b = np.array([0.0, 2.0, 1e3])
        ref = np.linalg.lstsq(A, b, rcond=None)[0]
        g = PoseGraph(
            [line(0.0), line(2.0)],
            [Constraint.prior(0, line(0.0)), Constraint.prior(1, line(2.0)),
             Constraint.relative(0, 1, RelativePose([1, 0, 0], [1, 0, 0, 0]), 1e6)],
        )
        res = optimize(g)
        np.testing.assert_allclose([p.t[0] for p in res.graph.poses], ref, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_perturb_recover(self, seed):
        rng = np.random.default_rng(100 + seed)
        gt, cons = noiseless_chain(rng, int(rng.integers(3, 12)))
        start = [boxplus(p, np.r_[rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.3]) for p in gt]
        res = optimize(PoseGraph(start, cons))
        assert max_pose_error(res.graph.poses, gt) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_energy_non_increasing(self, seed):
        rng = np.random.default_rng(200 + seed)
        n = 6
        poses = [random_pose(rng) for _ in range(n)]
        cons = [Constraint.prior(k, random_pose(rng), rng.uniform(0.1, 5, 6)) for k in range(n)]
        cons += [Constraint.relative(k, k + 1, RelativePose(rng.normal(size=3), quat_normalize(rng.normal(size=4))),
                                     rng.uniform(1, 100, 6)) for k in range(n - 1)]
        res = optimize(PoseGraph(poses, cons))
        assert np.all(np.diff(res.energies) <= 0)
        assert res.energies[-1] == pytest.approx(total_energy(res.graph), rel=1e-12)

    def test_relative_only_graph_is_unconstrained(self):
        rng = np.random.default_rng(7)
        gt, cons = noiseless_chain(rng, 4)
        rel = [c for c in cons if c.kind == "relative"]
        with pytest.raises(UnconstrainedPose) as info:
            optimize(PoseGraph(gt, rel))
        assert info.value.indices == [0, 1, 2, 3]

    def test_unconstrained_lists_free_component(self):
        g = PoseGraph(
            [Pose.identity()] * 4,
            [Constraint.prior(0, Pose.identity()), Constraint.relative(0, 1, RelativePose.identity()),
             Constraint.relative(2, 3, RelativePose.identity())],
        )
        assert unconstrained_poses(g) == [2, 3]

    def test_damping_still_converges(self):
        rng = np.random.default_rng(8)
        gt, cons = noiseless_chain(rng, 5)
        start = [boxplus(p, rng.normal(size=6) * 0.2) for p in gt]
        res = optimize(PoseGraph(start, cons), SolverConfig(damping=1e-3))
        assert max_pose_error(res.graph.poses, gt) < 1e-6

    def test_max_iters_respected(self):
        rng = np.random.default_rng(9)
        gt, cons = noiseless_chain(rng, 5)
        start = [boxplus(p, rng.normal(size=6) * 0.2) for p in gt]
        assert len(optimize(PoseGraph(start, cons), SolverConfig(max_iters=1)).steps) == 1


def reference_fusion(apr, rpr, cfg):
    """The windowed algorithm written out directly: one optimize() per window."""
    n = len(apr)
    starts = list(range(0, n - cfg.window + 1, cfg.stride))
    if starts[-1] != n - cfg.window:
        starts.append(n - cfg.window)
    out, emitted = [None] * n, 0
    for s in starts:
        frames = range(s, s + cfg.window)
        cons = [Constraint.prior(f - s, apr[f], cfg.apr_stiffness) for f in frames]
        cons += [Constraint.relative(f - s, f - s + 1, rpr[f], cfg.rpr_stiffness) for f in frames[:-1]]
        res = optimize(PoseGraph([apr[f] for f in frames], cons))
        for f in range(max(emitted, s), s + cfg.window):
            out[f] = res.graph.poses[f - s]
        emitted = s + cfg.window
    return out


def noisy_streams(seed, n):
    rng = np.random.default_rng(seed)
    gt, _ = noiseless_chain(rng, n)
    apr = [boxplus(p, np.r_[rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.05]) for p in gt]
    rpr = []
    for a, b in zip(gt[:-1], gt[1:]):
        d = relative_between(a, b)
        rpr.append(RelativePose(d.dt + rng.normal(size=3) * 0.01, d.dq))
    return gt, apr, rpr


class TestFuseStreams:
    @pytest.mark.parametrize("window", [2, 3, 5, 8])
    def test_noiseless_is_fixed_point(self, window):
        rng = np.random.default_rng(10)
        gt, _ = noiseless_chain(rng, 12)
        rpr = [relative_between(a, b) for a, b in zip(gt[:-1], gt[1:])]
        fused = fuse_streams(gt, rpr, FusionConfig(window=window))
        assert len(fused) == 12
        assert max_pose_error(fused, gt) < 1e-9

    def test_zero_rpr_stiffness_returns_apr(self):
        _, apr, rpr = noisy_streams(11, 10)
        fused = fuse_streams(apr, rpr, FusionConfig(rpr_stiffness=0.0))
        assert max_pose_error(fused, apr) < 1e-9

    @pytest.mark.parametrize("window,stride", [(5, 1), (5, 2), (4, 3), (3, 1)])
    def test_matches_reference_loop(self, window, stride):
        _, apr, rpr = noisy_streams(12, 17)
        cfg = FusionConfig(window=window, stride=stride)
        assert max_pose_error(fuse_streams(apr, rpr, cfg), reference_fusion(apr, rpr, cfg)) < 1e-8

    def test_fusion_beats_apr(self):
        gt, apr, rpr = noisy_streams(13, 40)
        fused = fuse_streams(apr, rpr)
        err = lambda est: np.median([np.linalg.norm(p.t - q.t) for p, q in zip(est, gt)])  # noqa: E731
        assert err(fused) < err(apr)

    def test_outlier_matches_quadratic_reference(self):
        cfg = FusionConfig(window=5, apr_stiffness=1.0, rpr_stiffness=1e4)
        apr = [line(float(k) + (10.0 if k == 5 else 0.0)) for k in range(10)]
        rpr = [RelativePose([1, 0, 0], [1, 0, 0, 0])] * 9
        fused = fuse_streams(apr, rpr, cfg)
        # translation-only problem: each window is linear least squares
        ref, emitted = [None] * 10, 0
        for s in range(6):
            A = np.vstack([np.eye(5), 100.0 * (np.eye(5, k=1) - np.eye(5))[:4]])
            b = np.r_[[apr[f].t[0] for f in range(s, s + 5)], 100.0 * np.ones(4)]
            x = np.linalg.lstsq(A, b, rcond=None)[0]
            for f in range(max(emitted, s), s + 5):
                ref[f] = x[f - s]
            emitted = s + 5
        np.testing.assert_allclose([p.t[0] for p in fused], ref, atol=1e-6)

    @pytest.mark.xfail(strict=True, reason="a 5-frame window spreads a 10 m outlier as ~10/5 m; see decisions ledger")
    def test_outlier_bound_claim(self):
        cfg = FusionConfig(window=5, apr_stiffness=1.0, rpr_stiffness=1e4)
        apr = [line(float(k) + (10.0 if k == 5 else 0.0)) for k in range(10)]
        fused = fuse_streams(apr, [RelativePose([1, 0, 0], [1, 0, 0, 0])] * 9, cfg)
        assert abs(fused[5].t[0] - 5.0) < 0.5

    def test_length_mismatch(self):
        with pytest.raises(StreamLengthMismatch):
            fuse_streams([Pose.identity()] * 6, [RelativePose.identity()] * 6)
        with pytest.raises(StreamLengthMismatch):
            fuse_streams([Pose.identity()] * 3, [RelativePose.identity()] * 2, FusionConfig(window=5))

    @pytest.mark.parametrize("kw", [{"window": 1}, {"stride": 0}, {"skip": 0}, {"window": 3, "stride": 3}])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            FusionConfig(**kw)

    def test_missing_apr_bridged_by_rpr(self):
        gt, apr, rpr = noisy_streams(14, 20)
        holes = list(apr)
        for f in range(8, 12):
            holes[f] = None
        fused = fuse_streams(holes, rpr)
        assert all(p is not None for p in fused)
        gap_err = max(np.linalg.norm(fused[f].t - gt[f].t) for f in range(8, 12))
        assert gap_err < 0.5

    def test_window_without_anchor_reports_window(self):
        _, apr, rpr = noisy_streams(15, 10)
        holes = [None] * 5 + list(apr[5:])
        with pytest.raises(UnconstrainedPose) as info:
            fuse_streams(holes, rpr)
        assert info.value.window == 0

    def test_skip_two(self):
        rng = np.random.default_rng(16)
        gt, _ = noiseless_chain(rng, 10)
        rpr = [relative_between(a, b) for a, b in zip(gt[:-1], gt[1:])]
        fused = fuse_streams(gt, rpr, FusionConfig(window=4, skip=2))
        assert max_pose_error(fused, gt) < 1e-9

    def test_stats(self):
        _, apr, rpr = noisy_streams(17, 12)
        fused, stats = fuse_streams_with_stats(apr, rpr)
        assert [s.start for s in stats] == list(range(8))
        assert all(s.energy_after <= s.energy_before for s in stats)


class TestDropRepeated:
    def test_repeats_become_missing(self):
        a, b = line(0.0), line(1.0)
        assert drop_repeated([a, a, None, a, b, b]) == [a, None, None, None, b, None]

    def test_equal_values_not_identity(self):
        assert drop_repeated([line(0.0), line(0.0)])[1] is None

    def test_frozen_stream_fusion_uses_rpr(self):
        gt, apr, rpr = noisy_streams(18, 30)
        frozen = list(apr)
        for f in range(10, 20):
            frozen[f] = apr[9]
        err = lambda est: np.mean([np.linalg.norm(est[f].t - gt[f].t) for f in range(10, 20)])  # noqa: E731
        plain = fuse_streams(frozen, rpr)
        dropped = fuse_streams(frozen, rpr, FusionConfig(drop_repeated=True))
        assert err(dropped) < err(plain)
