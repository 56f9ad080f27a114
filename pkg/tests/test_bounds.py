"""Interval propagation: containment, certification soundness, gradients."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

import robustlab as rl
from conftest import fd_param_grad, flat_grads, rel_err

KINDS = ("linf", "l2", "signal")


def sample_set(tm, d, n, rng):
    if tm.kind == "linf":
        return rng.uniform(-tm.eps, tm.eps, size=(n, d))
    if tm.kind == "l2":
        z = rng.normal(size=(n, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        return tm.eps * z * rng.uniform(0, 1, size=(n, 1)) ** (1 / d)
    which = rng.integers(0, tm.k, size=n)
    beta = rng.uniform(-tm.eps, tm.eps, size=n)
    return beta[:, None] * tm.directions[which]


class TestFirstLayer:
    def test_linf_closed_form(self):
        # Radius for the cube is eps * |w|_1 per row.
        w1 = np.array([[1.0, -2.0], [0.5, 0.5]])
        b1 = np.array([0.1, -0.1])
        x = np.array([[1.0, 1.0]])
        lb, ub = rl.first_layer_bounds(rl.ThreatModel.linf(0.5), x, w1, b1)
        center = x @ w1.T + b1
        rad = 0.5 * np.abs(w1).sum(axis=1)
        assert_allclose(lb, center - rad, rtol=1e-15)
        assert_allclose(ub, center + rad, rtol=1e-15)

    @pytest.mark.parametrize("kind", KINDS)
    def test_contains_sampled_perturbations(self, kind, make_threat):
        rng = np.random.default_rng(0)
        tm = make_threat(kind, 0.6, d=4, k=2)
        w1 = rng.normal(size=(5, 4))
        b1 = rng.normal(size=5)
        x = rng.normal(size=(3, 4))
        lb, ub = rl.first_layer_bounds(tm, x, w1, b1)
        deltas = sample_set(tm, 4, 2000, rng)
        for i, xi in enumerate(x):
            z = (xi + deltas) @ w1.T + b1
            assert np.all(z >= lb[i] - 1e-9)
            assert np.all(z <= ub[i] + 1e-9)

    def test_tight_for_aligned_direction(self):
        # One signal direction equal to the weight row: bound is attained.
        w1 = np.array([[0.6, 0.8]])
        tm = rl.ThreatModel.signal(2.0, w1 / 1.0)
        x = np.zeros((1, 2))
        lb, ub = rl.first_layer_bounds(tm, x, w1, np.zeros(1))
        assert_allclose(ub[0, 0], 2.0, rtol=1e-12)
        assert_allclose(lb[0, 0], -2.0, rtol=1e-12)


class TestIntervalOps:
    def test_affine_sign_split(self):
        w = np.array([[2.0, -1.0]])
        b = np.array([0.5])
        lb, ub = rl.interval_affine(w, b, np.array([[0.0, 0.0]]), np.array([[1.0, 1.0]]))
        # Worst case: 2*0 - 1*1 + 0.5; best: 2*1 - 1*0 + 0.5.
        assert_allclose(lb, [[-0.5]])
        assert_allclose(ub, [[2.5]])

    def test_relu_clamps(self):
        lb, ub = rl.interval_relu(np.array([-1.0, 0.5]), np.array([-0.2, 2.0]))
        assert_allclose(lb, [0.0, 0.5])
        assert_allclose(ub, [0.0, 2.0])


class TestIbpBounds:
    @pytest.mark.parametrize("kind", KINDS)
    def test_monte_carlo_containment(self, kind, make_net, make_threat):
        net = make_net((4, 6, 5, 2), seed=1)
        tm = make_threat(kind, 0.4, d=4, k=2)
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 4))
        bs = rl.ibp_bounds(net, x, tm)
        deltas = sample_set(tm, 4, 1500, rng)
        for i, xi in enumerate(x):
            pre, _ = net.forward_full(xi + deltas)
            for layer_idx, (lb, ub) in enumerate(bs.hidden + [bs.output]):
                assert np.all(pre[layer_idx] >= lb[i] - 1e-9)
                assert np.all(pre[layer_idx] <= ub[i] + 1e-9)

    def test_growing_eps_nests_bounds(self, make_net, make_threat):
        net = make_net((3, 5, 2), seed=3)
        x = np.random.default_rng(4).normal(size=(2, 3))
        small = rl.ibp_bounds(net, x, rl.ThreatModel.l2(0.2))
        big = rl.ibp_bounds(net, x, rl.ThreatModel.l2(0.5))
        assert small.nested_in(big)
        assert not big.nested_in(small)

    def test_zero_eps_collapses_to_forward(self, make_net):
        net = make_net((3, 6, 2), seed=5)
        x = np.random.default_rng(6).normal(size=(4, 3))
        bs = rl.ibp_bounds(net, x, rl.ThreatModel.l2(0.0))
        pre, _ = net.forward_full(x)
        for (lb, ub), z in zip(bs.hidden + [bs.output], pre):
            assert_allclose(lb, z, atol=1e-12)
            assert_allclose(ub, z, atol=1e-12)


class TestStability:
    def test_partition_is_exhaustive(self, make_net, make_threat):
        net = make_net((4, 8, 6, 2), seed=7)
        tm = make_threat("l2", 0.5, d=4)
        x = np.random.default_rng(8).normal(size=(5, 4))
        part = rl.StabilityPartition.from_bounds(rl.ibp_bounds(net, x, tm))
        for d, a, u in zip(part.dead, part.active, part.unstable):
            combined = d.astype(int) + a.astype(int) + u.astype(int)
            assert np.all(combined == 1)

    def test_unstable_fraction_hand_case(self):
        # Single neuron w=(1,), b=0, x=0.5, eps=1: bounds [-0.5, 1.5] straddle 0.
        net = rl.DenseNet([rl.Layer(np.array([[1.0]]), np.array([0.0])),
                           rl.Layer(np.array([[1.0], [0.0]]), np.zeros(2))])
        data = rl.LabeledSet(np.array([[0.5]]), np.array([0]))
        tm = rl.ThreatModel.linf(1.0)
        assert rl.unstable_fraction(net, data, tm) == 1.0
        tiny = rl.ThreatModel.linf(0.1)
        assert rl.unstable_fraction(net, data, tiny) == 0.0

    def test_unstable_fraction_monotone_in_eps(self, make_net, tiny_spheres):
        net = make_net((5, 10, 2), seed=9)
        fracs = [rl.unstable_fraction(net, tiny_spheres, rl.ThreatModel.l2(e))
                 for e in (0.1, 0.5, 2.0)]
        assert fracs[0] <= fracs[1] <= fracs[2]


class TestCertification:
    def test_certified_points_resist_sampled_attacks(self, make_net, make_threat):
        net = make_net((4, 8, 2), seed=10)
        tm = make_threat("l2", 0.3, d=4)
        rng = np.random.default_rng(11)
        x = rng.normal(scale=1.5, size=(30, 4))
        y = rng.integers(0, 2, size=30)
        cert = rl.ibp_certified_margin(net, x, y, tm)
        deltas = sample_set(tm, 4, 500, rng)
        for i in np.flatnonzero(cert > 0):
            margins = rl.class_margin(net.forward(x[i] + deltas), np.full(500, y[i]))
            assert margins.min() >= cert[i] - 1e-9

    def test_certified_margin_lower_bounds_clean_margin(self, make_net, make_threat):
        net = make_net((4, 6, 3), seed=12)
        tm = make_threat("linf", 0.2, d=4)
        rng = np.random.default_rng(13)
        x = rng.normal(size=(20, 4))
        y = rng.integers(0, 3, size=20)
        cert = rl.ibp_certified_margin(net, x, y, tm)
        clean = rl.class_margin(net.forward(x), y)
        assert np.all(cert <= clean + 1e-9)

    def test_zero_eps_margin_matches_clean(self, make_net):
        net = make_net((3, 5, 2), seed=14)
        rng = np.random.default_rng(15)
        x = rng.normal(size=(10, 3))
        y = rng.integers(0, 2, size=10)
        cert = rl.ibp_certified_margin(net, x, y, rl.ThreatModel.l2(0.0))
        assert_allclose(cert, rl.class_margin(net.forward(x), y), atol=1e-12)


class TestIbpLoss:
    def test_zero_eps_equals_cross_entropy(self, make_net):
        net = make_net((4, 7, 2), seed=16)
        rng = np.random.default_rng(17)
        x = rng.normal(size=(12, 4))
        y = rng.integers(0, 2, size=12)
        robust = rl.ibp_robust_loss(net, x, y, rl.ThreatModel.linf(0.0))
        plain = float(rl.cross_entropy(net.forward(x), y).mean())
        assert_allclose(robust, plain, atol=1e-9)

    def test_loss_upper_bounds_clean_loss(self, make_net, make_threat):
        net = make_net((4, 6, 2), seed=18)
        tm = make_threat("l2", 0.5, d=4)
        rng = np.random.default_rng(19)
        x = rng.normal(size=(15, 4))
        y = rng.integers(0, 2, size=15)
        assert rl.ibp_robust_loss(net, x, y, tm) >= float(
            rl.cross_entropy(net.forward(x), y).mean()) - 1e-12

    @pytest.mark.parametrize("kind", KINDS)
    def test_gradient_matches_finite_differences(self, kind, make_net, make_threat):
        # Stay off stability kinks: skip seeds whose bounds sit near zero.
        tm = make_threat(kind, 0.3, d=4, k=2)
        rng = np.random.default_rng(20)
        checked = 0
        for seed in range(40):
            net = rl.init_net((4, 5, 3, 2), np.random.default_rng(100 + seed))
            x = rng.normal(size=(3, 4))
            y = rng.integers(0, 2, size=3)
            bs = rl.ibp_bounds(net, x, tm)
            closest = min(float(np.min(np.abs(b))) for pair in bs.hidden for b in pair)
            if closest < 1e-3:
                continue
            loss, grads = rl.ibp_loss_grad(net, x, y, tm)
            assert_allclose(loss, rl.ibp_robust_loss(net, x, y, tm), rtol=1e-12)
            fd = fd_param_grad(lambda n: rl.ibp_robust_loss(n, x, y, tm), net)
            assert rel_err(flat_grads(grads), flat_grads(fd)) < 1e-5
            checked += 1
            if checked >= 5:
                break
        assert checked >= 3


class TestIbpTrain:
    def test_training_shrinks_certified_error(self, tiny_spheres):
        tm = rl.ThreatModel.l2(0.3)
        net = rl.init_net((tiny_spheres.d, 16, 2), np.random.default_rng(21))
        cfg = rl.TrainConfig(lr=0.05, epochs=40, batch_size=20, ramp_epochs=10)
        rl.ibp_train(net, tiny_spheres, tm, cfg, np.random.default_rng(22))
        cert = rl.ibp_certified_margin(net, tiny_spheres.x, tiny_spheres.y, tm)
        assert (cert > 0).mean() > 0.9

    def test_trace_records_ramp(self, tiny_spheres):
        tm = rl.ThreatModel.l2(0.4)
        net = rl.init_net((tiny_spheres.d, 8, 2), np.random.default_rng(23))
        cfg = rl.TrainConfig(lr=0.01, epochs=6, batch_size=20,
                             ramp_start=0.01, ramp_epochs=4)
        trace = rl.ibp_train(net, tiny_spheres, tm, cfg, np.random.default_rng(24))
        assert trace.eps[0] == 0.01
        assert trace.eps[-1] == 0.4
        assert all(a <= b for a, b in zip(trace.eps, trace.eps[1:]))
