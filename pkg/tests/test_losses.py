import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from posefusion.errors import DimensionMismatch, IndexOutOfRange, LengthMismatch
from posefusion.geometry import Pose, RelativePose, quat_normalize, relative_between
from posefusion.losses import (
    CONVOLUTIONAL,
    LOG_VARIANCE,
    NONLINEAR,
    VARIANCE,
    AuxParams,
    DistanceConfig,
    LossWeights,
    MultiTaskLinear,
    UncertainPose,
    aleatoric_loss,
    aleatoric_loss_relative,
    aux_alternating_step,
    aux_combine,
    fusion_total_loss,
    main_step,
    mapnet_loss,
    pose_distance,
    uncertain_pose_loss,
)


def random_pose(rng):
    return Pose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))


def scalar_distance(ta, qa, tb, qb, beta=1.0):
    """Plain-Python L1 distance with the closer quaternion sign."""
    dt = sum(abs(x - y) for x, y in zip(ta, tb))
    dq = min(sum(abs(x - y) for x, y in zip(qa, qb)), sum(abs(x + y) for x, y in zip(qa, qb)))
    return dt + beta * dq


class TestPoseDistance:
    def test_identical(self):
        p = Pose([1, 2, 3], quat_normalize([1, 2, 3, 4]))
        assert pose_distance(p, p) == 0.0

    def test_unit_offset_l1(self):
        assert pose_distance(Pose([1, 0, 0], [1, 0, 0, 0]), Pose.identity()) == 1.0

    def test_sign_ambiguity(self):
        q = quat_normalize([0.3, 0.1, -0.5, 0.2])
        a = Pose([1, 1, 1], q)
        b = object.__new__(Pose)
        object.__setattr__(b, "t", a.t)
        object.__setattr__(b, "q", -q)
        assert pose_distance(a, b) == 0.0

    def test_l2_and_beta(self):
        a = Pose([3, 4, 0], [1, 0, 0, 0])
        assert pose_distance(a, Pose.identity(), DistanceConfig(norm="L2")) == 5.0
        b = Pose([0, 0, 0], [0, 1, 0, 0])
        assert pose_distance(b, Pose.identity(), DistanceConfig(beta_q=3.0)) == pytest.approx(6.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            DistanceConfig(beta_q=0)
        with pytest.raises(ValueError):
            DistanceConfig(norm="L3")

    @settings(max_examples=50)
    @given(st.integers(0, 100_000), st.sampled_from(["L1", "L2"]))
    def test_pseudometric(self, seed, norm):
        rng = np.random.default_rng(seed)
        a, b, c = (random_pose(rng) for _ in range(3))
        cfg = DistanceConfig(beta_q=float(rng.uniform(0.1, 10)), norm=norm)
        assert pose_distance(a, b, cfg) == pose_distance(b, a, cfg)
        assert pose_distance(a, c, cfg) <= pose_distance(a, b, cfg) + pose_distance(b, c, cfg) + 1e-9

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b = random_pose(rng), random_pose(rng)
            assert pose_distance(a, b) == pytest.approx(scalar_distance(a.t, a.q, b.t, b.q), rel=1e-14)


class TestMapnetLoss:
    def test_exact(self):
        rng = np.random.default_rng(1)
        p = [random_pose(rng) for _ in range(4)]
        assert mapnet_loss(p, p, [(0, 1), (2, 3)]) == 0.0

    def test_common_offset_cancels_in_pairs(self):
        gt = [Pose.identity(), Pose([1, 0, 0], [1, 0, 0, 0])]
        pred = [Pose(g.t + [1, 0, 0], g.q) for g in gt]
        assert mapnet_loss(pred, gt, [(0, 1)]) == 2.0

    def test_random_four_frames_scalar_oracle(self):
        rng = np.random.default_rng(2)
        gt = [random_pose(rng) for _ in range(4)]
        pred = [random_pose(rng) for _ in range(4)]
        pairs = [(0, 1), (1, 3), (2, 0)]
        want = sum(scalar_distance(a.t, a.q, b.t, b.q) for a, b in zip(pred, gt))
        for i, j in pairs:
            dp_t, dp_q = pred[i].t - pred[j].t, pred[i].q - pred[j].q
            dg_t, dg_q = gt[i].t - gt[j].t, gt[i].q - gt[j].q
            # raw component differences: no sign flip
            want += sum(abs(x) for x in dp_t - dg_t) + sum(abs(x) for x in dp_q - dg_q)
        assert mapnet_loss(pred, gt, pairs) == pytest.approx(want, rel=1e-13)

    def test_geodesic_pairs(self):
        rng = np.random.default_rng(3)
        gt = [random_pose(rng) for _ in range(3)]
        pred = [random_pose(rng) for _ in range(3)]
        want = sum(pose_distance(a, b) for a, b in zip(pred, gt))
        want += pose_distance(relative_between(pred[0], pred[2]), relative_between(gt[0], gt[2]))
        assert mapnet_loss(pred, gt, [(0, 2)], literal=False) == pytest.approx(want, rel=1e-14)

    def test_errors(self):
        p = [Pose.identity()] * 2
        with pytest.raises(LengthMismatch):
            mapnet_loss(p, p[:1], [])
        with pytest.raises(IndexOutOfRange):
            mapnet_loss(p, p, [(0, 2)])


class TestFusionTotalLoss:
    def setup_method(self):
        rng = np.random.default_rng(4)
        self.gt = [random_pose(rng) for _ in range(2)]
        self.pred = [random_pose(rng) for _ in range(2)]
        self.rel_gt = [relative_between(*self.gt)]
        self.rel_pred = [RelativePose(rng.normal(size=3), quat_normalize(rng.normal(size=4)))]

    def loss(self, w):
        return fusion_total_loss(self.pred, self.gt, [(0, 1)], self.rel_pred, self.rel_gt, w)

    def test_all_zero(self):
        assert self.loss(LossWeights(0, 0, 0, allow_zero=True)) == 0.0

    def test_absolute_only(self):
        want = sum(pose_distance(a, b) for a, b in zip(self.pred, self.gt))
        assert self.loss(LossWeights(0, 0, 1)) == pytest.approx(want, rel=1e-15)

    def test_weighted_scalar_oracle(self):
        a, g = self.pred, self.gt
        abs_t = sum(scalar_distance(x.t, x.q, y.t, y.q) for x, y in zip(a, g))
        pair = sum(abs(v) for v in (a[0].t - a[1].t) - (g[0].t - g[1].t))
        pair += sum(abs(v) for v in (a[0].q - a[1].q) - (g[0].q - g[1].q))
        r, rg = self.rel_pred[0], self.rel_gt[0]
        rel = scalar_distance(r.dt, r.dq, rg.dt, rg.dq)
        assert self.loss(LossWeights(0.5, 2.0, 1.0)) == pytest.approx(abs_t + 0.5 * pair + 2.0 * rel, rel=1e-13)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(0, 0, 0)
        with pytest.raises(ValueError):
            LossWeights(-1, 1, 1)


class TestAleatoric:
    def test_examples(self):
        assert aleatoric_loss(1.0, 0.0) == 0.5
        assert aleatoric_loss(0.0, 0.0) == 0.0
        assert aleatoric_loss_relative(1.0, 0.0) == 0.5
        assert aleatoric_loss_relative(0.0, 2.0) == 1.0

    @settings(max_examples=100)
    @given(st.floats(0, 100), st.floats(-10, 10))
    def test_forms_agree(self, r, s):
        assert aleatoric_loss(r, math.exp(s), VARIANCE) == pytest.approx(aleatoric_loss(r, s, LOG_VARIANCE), abs=1e-12, rel=1e-12)

    @pytest.mark.parametrize("r", [1e-3, 0.25, 1.0, 4.0, 90.0])
    def test_minimizer_against_golden_section(self, r):
        res = minimize_scalar(lambda s: aleatoric_loss(r, s), bracket=(-1.0, 1.0), method="golden", tol=1e-12)
        assert math.log(r) == pytest.approx(res.x, abs=1e-6)

    def test_vectorized(self):
        out = aleatoric_loss(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
        np.testing.assert_array_equal(out, [0.5, 0.0])

    def test_errors(self):
        with pytest.raises(ValueError):
            aleatoric_loss(-1.0, 0.0)
        with pytest.raises(ValueError):
            aleatoric_loss(1.0, 0.0, VARIANCE)
        with pytest.raises(ValueError):
            aleatoric_loss(1.0, 0.0, "precision")

    def test_uncertain_pose(self):
        target = Pose([1, 0, 0], [1, 0, 0, 0])
        pred = UncertainPose(Pose.identity(), [0.0, math.log(2.0)])
        assert uncertain_pose_loss(pred, target) == pytest.approx(0.5 + 0.5 * math.log(2.0))
        shared = UncertainPose(Pose.identity(), [0.0])
        assert uncertain_pose_loss(shared, target) == 0.5
        with pytest.raises(ValueError):
            UncertainPose(Pose.identity(), [math.nan])


def softplus(x):
    return math.log1p(math.exp(-abs(x))) + max(x, 0.0)


def scalar_nonlinear(losses, layers):
    h = list(losses)
    for w, b in layers:
        h = [softplus(sum(h[r] * w[r][c] for r in range(len(h))) + b[c]) for c in range(len(b))]
    return h[0]


def scalar_conv(losses, layers):
    h = [list(losses)]
    for n, (k, b) in enumerate(layers):
        c_out, c_in, w = k.shape
        length = len(h[0]) - w + 1
        nxt = []
        for o in range(c_out):
            row = []
            for i in range(length):
                v = b[o] + sum(k[o][c][j] * h[c][i + j] for c in range(c_in) for j in range(w))
                row.append(softplus(v) if n < len(layers) - 1 else v)
            nxt.append(row)
        h = nxt
    return sum(h[0])


class TestAuxCombine:
    def test_nonlinear_zero_params(self):
        p = AuxParams(NONLINEAR, ((np.zeros((3, 1)), np.zeros(1)),))
        assert abs(aux_combine([1.0, 2.0, 3.0], p) - math.log(2.0)) <= 1e-12

    def test_conv_ones_kernel(self):
        p = AuxParams(CONVOLUTIONAL, ((np.ones((1, 1, 3)), np.zeros(1)),))
        assert aux_combine([1.0, 2.0, 3.0], p) == 6.0

    @pytest.mark.parametrize("seed", range(5))
    def test_nonlinear_scalar_oracle(self, seed):
        p = AuxParams.nonlinear([4, 3, 2, 1], seed=seed)
        losses = np.random.default_rng(seed).uniform(0, 3, 4)
        assert aux_combine(losses, p) == pytest.approx(scalar_nonlinear(losses, p.layers), rel=1e-13)

    @pytest.mark.parametrize("seed", range(5))
    def test_conv_scalar_oracle(self, seed):
        p = AuxParams.convolutional([1, 3, 1], [2, 2], seed=seed)
        losses = np.random.default_rng(seed).uniform(0, 3, 6)
        assert aux_combine(losses, p) == pytest.approx(scalar_conv(losses, p.layers), rel=1e-13)

    def test_flat_roundtrip(self):
        p = AuxParams.convolutional([1, 2, 1], [3, 1], seed=1)
        q = p.with_flat(p.flat())
        assert all(np.array_equal(a, b) for la, lb in zip(p.layers, q.layers) for a, b in zip(la, lb))

    def test_shape_errors(self):
        with pytest.raises(DimensionMismatch):
            AuxParams(NONLINEAR, ((np.zeros((3, 2)), np.zeros(2)),))
        with pytest.raises(DimensionMismatch):
            aux_combine([1.0, 2.0], AuxParams.nonlinear([3, 1]))
        with pytest.raises(DimensionMismatch):
            aux_combine([1.0], AuxParams.convolutional([1, 1], [3]))


def toy_batches(seed, n=64):
    """Main task y = 2x; the auxiliary task 2x + noise shares the signal."""
    rng = np.random.default_rng(seed)

    def batch():
        x = rng.normal(size=(n, 1))
        return x, np.hstack([2.0 * x, 2.0 * x + 0.1 * rng.normal(size=(n, 1))])

    return batch(), batch()


class TestAlternatingStep:
    def test_zero_rates_no_change(self):
        main, aux = MultiTaskLinear.init(1, 2, 2, seed=0), AuxParams.nonlinear([2, 1], seed=0)
        tr, ax = toy_batches(0)
        res = aux_alternating_step(main, aux, tr, ax, 0.0, 0.0)
        np.testing.assert_array_equal(res.main.shared, main.shared)
        np.testing.assert_array_equal(res.main.heads, main.heads)
        assert res.aux is aux

    def test_reduces_aux_loss(self):
        main, aux = MultiTaskLinear.init(1, 2, 2, seed=1), AuxParams.nonlinear([2, 2, 1], seed=1, nonnegative=True)
        tr, ax = toy_batches(1)
        first = None
        for _ in range(200):
            res = aux_alternating_step(main, aux, tr, ax, 0.05, 0.05)
            main, aux = res.main, res.aux
            first = res.aux_loss if first is None else first
        assert float(main.task_losses(*ax)[0]) < first

    def test_frozen_combiner_is_plain_descent(self):
        start, aux = MultiTaskLinear.init(1, 2, 2, seed=2), AuxParams.nonlinear([2, 1], seed=2)
        tr, ax = toy_batches(2)
        a = b = start
        for _ in range(50):
            a = aux_alternating_step(a, aux, tr, ax, 0.05, 0.0).main
            b = main_step(b, aux, tr, 0.05)
        np.testing.assert_array_equal(a.shared, b.shared)
        np.testing.assert_array_equal(a.heads, b.heads)

    def test_main_step_gradient_matches_fd(self):
        main, aux = MultiTaskLinear.init(2, 3, 2, seed=3), AuxParams.nonlinear([2, 2, 1], seed=3)
        rng = np.random.default_rng(3)
        X, Y = rng.normal(size=(16, 2)), rng.normal(size=(16, 2))
        lr = 1e-3
        stepped = main_step(main, aux, (X, Y), lr)
        g_shared = (main.shared - stepped.shared) / lr

        def total(v):
            m = MultiTaskLinear(v.reshape(main.shared.shape), main.heads)
            ell = m.task_losses(X, Y)
            return float(ell[0]) + aux_combine(ell, aux)

        from posefusion.fusion_kernels import finite_diff_grad

        fd = finite_diff_grad(total, main.shared.ravel(), 1e-6).reshape(main.shared.shape)
        np.testing.assert_allclose(g_shared, fd, rtol=1e-5, atol=1e-8)

    def test_negative_rate(self):
        main, aux = MultiTaskLinear.init(1, 2, 2), AuxParams.nonlinear([2, 1])
        tr, ax = toy_batches(0)
        with pytest.raises(ValueError):
            aux_alternating_step(main, aux, tr, ax, -1.0, 0.0)
