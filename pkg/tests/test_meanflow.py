import math

import numpy as np
import pytest
from scipy import integrate, stats

from reflowlab.budget import BudgetLedger
from reflowlab.errors import ConfigError
from reflowlab.meanflow import (
    CfgConfig,
    LossConfig,
    MeanFlowModel,
    TimeSamplerConfig,
    adaptive_loss,
    cfg_velocity,
    guidance_coefficients,
    mean_velocity_quadrature_oracle,
    meanflow_loss_grads,
    meanflow_target,
    one_step_sample,
    sample_time_pair,
    sample_time_pairs,
    train_meanflow,
    u_shape_cdf,
    u_shape_icdf,
)
from reflowlab.nncore import MlpModel, NetSpec, mlp_forward
from reflowlab.rectflow import Coupling, CouplingSet, FlowModel


def linear_meanflow(a, b_r, b_t, bias=None, n_classes=0, class_w=None):
    a = np.asarray(a, dtype=float)
    d = a.shape[0]
    cols = [a, np.reshape(b_r, (d, 1)), np.reshape(b_t, (d, 1))]
    if n_classes:
        cols.append(np.asarray(class_w, dtype=float))
    w = np.hstack(cols)
    net = MlpModel([w.shape[1], d], [w], [np.zeros(d) if bias is None else np.asarray(bias, float)])
    return MeanFlowModel(net, d, n_classes, 0.1 if n_classes else 0.0)


def constant_meanflow(c, n_classes=0):
    d = len(c)
    w = np.zeros((d, d + 2 + n_classes))
    return MeanFlowModel(MlpModel([d + 2 + n_classes, d], [w], [np.asarray(c, float)]), d, n_classes,
                         0.1 if n_classes else 0.0)


def random_meanflow(seed, n_classes=0):
    rng = np.random.default_rng(seed)
    m = MeanFlowModel.init(2, NetSpec((16, 16)), rng, n_classes, 0.1 if n_classes else 0.0)
    for b in m.net.biases:
        b[:] = rng.normal(scale=0.2, size=b.shape)
    return m


class TestTimeSampler:
    def test_icdf_worked_value(self):
        t = float(u_shape_icdf(0.5, 4.0))
        assert t == pytest.approx(np.arcsinh(0.5 * np.sinh(4.0)) / 4.0, rel=1e-15)
        assert t == pytest.approx(0.82696, abs=5e-6)  # asinh(13.6450) = 3.30786
        dens = lambda u: np.exp(4 * u) + np.exp(-4 * u)  # noqa: E731
        part, _ = integrate.quad(dens, 0.0, t)
        whole, _ = integrate.quad(dens, 0.0, 1.0)
        assert part / whole == pytest.approx(0.5, abs=1e-10)

    def test_cdf_inverse_pair(self):
        xi = np.linspace(0, 1, 101)
        np.testing.assert_allclose(u_shape_cdf(u_shape_icdf(xi, 4.0), 4.0), xi, atol=1e-12)

    def test_ratio_zero_means_r_equals_t(self):
        d = sample_time_pairs(TimeSamplerConfig(ratio_r_neq_t=0.0), 10_000, np.random.default_rng(0))
        assert np.all(d.r == d.t)

    def test_support(self):
        for cfg in (TimeSamplerConfig(), TimeSamplerConfig(avoid_enabled=False),
                    TimeSamplerConfig(t_dist="uniform", interval_dist="uniform", ratio_r_neq_t=1.0)):
            d = sample_time_pairs(cfg, 50_000, np.random.default_rng(1))
            assert np.all((0 <= d.r) & (d.r <= d.t) & (d.t <= 1))

    def test_avoidance_empties_forbidden_region(self):
        d = sample_time_pairs(TimeSamplerConfig(), 200_000, np.random.default_rng(2))
        assert not np.any((d.t > 0.95) & (d.r > 0) & (d.r < 0.4))
        off = sample_time_pairs(TimeSamplerConfig(avoid_enabled=False), 200_000, np.random.default_rng(2))
        assert np.any((off.t > 0.95) & (off.r > 0) & (off.r < 0.4))
        assert d.n_avoid_rewrites == int(np.sum((off.t > 0.95) & (off.r > 0) & (off.r < 0.4)))

    def test_single_pair(self):
        r, t = sample_time_pair(TimeSamplerConfig(), np.random.default_rng(0))
        assert 0.0 <= r <= t <= 1.0

    def test_ks_default_against_closed_form(self):
        d = sample_time_pairs(TimeSamplerConfig(), 100_000, np.random.default_rng(7))
        assert stats.kstest(d.t, lambda u: u_shape_cdf(u, 4.0)).pvalue > 0.01

    def test_r_equals_t_fraction(self):
        d = sample_time_pairs(TimeSamplerConfig(), 200_000, np.random.default_rng(8))
        assert abs(np.mean(d.r == d.t) - 0.75) <= 0.005

    def test_ks_uniform_option(self):
        d = sample_time_pairs(TimeSamplerConfig(t_dist="uniform"), 20_000, np.random.default_rng(3))
        assert stats.kstest(d.t, "uniform").pvalue > 0.01

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TimeSamplerConfig(ratio_r_neq_t=1.5)
        with pytest.raises(ConfigError):
            TimeSamplerConfig(u_shape_a=0.0)


class TestTarget:
    def coupling(self):
        return Coupling(np.array([1.0, -0.5]), np.array([-0.3, 2.0]), None, 0.0)

    def test_r_equals_t_is_exact(self):
        m = random_meanflow(0)
        c = self.coupling()
        got = meanflow_target(m, c, 0.37, 0.37)
        assert got.tobytes() == (c.z - c.x).tobytes()

    def test_constant_model(self):
        m = constant_meanflow([0.4, -2.0])
        c = self.coupling()
        np.testing.assert_array_equal(meanflow_target(m, c, 0.1, 0.8), c.z - c.x)

    def test_linear_model_by_hand(self):
        a = np.array([[0.5, -1.0], [2.0, 0.25]])
        b_r, b_t = np.array([0.3, -0.7]), np.array([1.5, 0.2])
        m = linear_meanflow(a, b_r, b_t, bias=[0.1, 0.1])
        c = self.coupling()
        r, t = 0.2, 0.9
        v = c.z - c.x
        want = v - (t - r) * (a @ v + b_t)
        np.testing.assert_allclose(meanflow_target(m, c, r, t), want, rtol=1e-14, atol=1e-14)

    def test_jvp_matches_finite_difference_along_path(self):
        m = random_meanflow(4)
        c = self.coupling()
        r, t, h = 0.25, 0.6, 1e-5
        v = c.z - c.x

        def u_at(s):
            zs = (1 - s) * c.x + s * c.z
            return m.mean_velocity(zs[None], r, s)[0]

        dudt = (u_at(t + h) - u_at(t - h)) / (2 * h)
        np.testing.assert_allclose(meanflow_target(m, c, r, t), v - (t - r) * dudt, rtol=1e-6, atol=1e-8)

    def test_flow_velocity_source(self):
        flow = FlowModel(MlpModel([3, 2], [np.zeros((2, 3))], [np.array([5.0, 6.0])]), 2)
        m = constant_meanflow([0.0, 0.0])
        np.testing.assert_array_equal(meanflow_target(m, self.coupling(), 0.1, 0.5, velocity_source=flow), [5.0, 6.0])

    def test_precondition(self):
        with pytest.raises(ValueError):
            meanflow_target(random_meanflow(0), self.coupling(), 0.8, 0.2)


class TestAdaptiveLoss:
    def test_p_zero_is_mse(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 50, 2))
        loss, w = adaptive_loss(a, b, 0.0, 1e-3)
        assert np.all(w == 1.0)
        assert loss == pytest.approx(np.mean(np.sum((a - b) ** 2, axis=1)))

    def test_exact_prediction(self):
        a = np.ones((3, 2))
        assert adaptive_loss(a, a, 0.5, 1e-3)[0] == 0.0

    def test_hand_value(self):
        # e = 3, c = 1, p = 0.5 -> w = 1/2, weighted contribution 1.5
        loss, w = adaptive_loss(np.array([[1.0, 1.0, 1.0]]), np.zeros((1, 3)), 0.5, 1.0)
        assert w[0] == pytest.approx(0.5) and loss == pytest.approx(1.5)


class TestStopGradient:
    def batch(self, seed=0):
        rng = np.random.default_rng(seed)
        x, z = rng.normal(size=(2, 32, 2))
        t = rng.random(32)
        r = t * rng.random(32)
        return (1 - t)[:, None] * x + t[:, None] * z, r, t, z - x

    def test_cached_target_gives_identical_gradients(self):
        m = random_meanflow(1)
        z_t, r, t, v = self.batch()
        loss1, g1, tgt = meanflow_loss_grads(m, z_t, r, t, None, v, LossConfig())
        loss2, g2, _ = meanflow_loss_grads(m, z_t, r, t, None, v, LossConfig(), u_tgt=tgt.copy())
        assert loss1 == loss2
        for a, b in zip(g1, g2):
            assert np.max(np.abs(a - b)) <= 1e-12

    def test_gradient_treats_target_and_weight_as_constants(self):
        m = random_meanflow(2)
        z_t, r, t, v = self.batch(1)
        cfg = LossConfig(p=0.5, c=1e-3)
        _, grads, tgt = meanflow_loss_grads(m, z_t, r, t, None, v, cfg)
        inp = m.inputs(z_t, r, t)
        pred0 = mlp_forward(m.net, inp)
        w0 = (np.sum((pred0 - tgt) ** 2, axis=1) + cfg.c) ** (-cfg.p)

        def frozen_loss():
            pred = mlp_forward(m.net, inp)
            return np.mean(w0 * np.sum((pred - tgt) ** 2, axis=1))

        h = 1e-6
        p = m.net.weights[1]
        for idx in [(0, 0), (3, 7), (15, 15)]:
            keep = p[idx]
            p[idx] = keep + h
            up = frozen_loss()
            p[idx] = keep - h
            down = frozen_loss()
            p[idx] = keep
            assert grads[2][idx] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


class TestCfg:
    def test_guidance_off(self):
        flow = FlowModel(MlpModel([5, 2], [np.zeros((2, 5))], [np.array([1.0, 2.0])]), 2, n_classes=2)
        mf = random_meanflow(3, n_classes=2)
        z = np.random.default_rng(0).normal(size=(4, 2))
        out = cfg_velocity(flow, mf, z, 0.4, np.array([0, 1, 1, 0]), 1.0, 0.0)
        np.testing.assert_array_equal(out, flow.velocity(z, 0.4, np.array([0, 1, 1, 0])))

    def test_two_term_reduction(self):
        mf = random_meanflow(5, n_classes=2)
        z = np.random.default_rng(1).normal(size=(3, 2))
        v = np.random.default_rng(2).normal(size=(3, 2))
        out = cfg_velocity(None, mf, z, 0.6, np.array([1, 0, 1]), 2.5, 0.0, v_cond=v)
        np.testing.assert_allclose(out, 2.5 * v + (1 - 2.5) * mf.mean_velocity(z, 0.6, 0.6, None), rtol=1e-14)

    def test_constants_by_hand(self):
        # v | c = a, u | c = b, u = c_: class weight column shifts the conditional output from c_ to b
        a, b, c_ = np.array([1.0, 0.0]), np.array([0.0, 3.0]), np.array([2.0, 2.0])
        flow = FlowModel(MlpModel([5, 2], [np.zeros((2, 5))], [a]), 2, n_classes=2)
        class_w = np.stack([b - c_, b - c_], axis=1)
        mf = linear_meanflow(np.zeros((2, 2)), np.zeros(2), np.zeros(2), bias=c_, n_classes=2, class_w=class_w)
        out = cfg_velocity(flow, mf, np.zeros((1, 2)), 0.5, np.array([1]), 2.0, 0.5)
        np.testing.assert_allclose(out[0], 2 * a + 0.5 * b - 0.5 * c_)

    def test_requires_unconditional_branch(self):
        mf = random_meanflow(0, n_classes=2)
        mf.class_dropout = 0.0
        with pytest.raises(ConfigError):
            cfg_velocity(None, mf, np.zeros((1, 2)), 0.5, np.array([0]), 2.0, 0.0, v_cond=np.zeros((1, 2)))
        with pytest.raises(ConfigError):
            cfg_velocity(None, random_meanflow(0), np.zeros((1, 2)), 0.5, np.array([0]), 2.0, 0.0,
                         v_cond=np.zeros((1, 2)))

    def test_coefficients(self):
        om, ka = guidance_coefficients(np.array([1.5, 2.5]), "zero")
        np.testing.assert_array_equal(om, [1.5, 2.5])
        assert np.all(ka == 0)
        om, ka = guidance_coefficients(np.array([1.5, 2.5]), "paper_formula")
        np.testing.assert_allclose(ka, [0.99, 0.99])
        np.testing.assert_allclose(om / (1 - ka), [1.5, 2.5])
        with pytest.raises(ConfigError):
            CfgConfig(omega_prime_range=(0.5, 2.0))


class TestSampling:
    def test_constant_model(self):
        z = np.random.default_rng(0).normal(size=(5, 2))
        led = BudgetLedger()
        np.testing.assert_allclose(one_step_sample(constant_meanflow([1.0, -1.0]), z, ledger=led), z - [1.0, -1.0])
        assert led.phases["eval"].forward_evals == 5

    def test_quadrature_constant_field(self):
        flow = FlowModel(MlpModel([3, 2], [np.zeros((2, 3))], [np.array([0.7, -0.2])]), 2)
        out = mean_velocity_quadrature_oracle(flow, np.ones((3, 2)), 0.3, 0.9, 10)
        np.testing.assert_allclose(out, np.tile([0.7, -0.2], (3, 1)), atol=1e-15)

    def test_quadrature_linear_field(self):
        w = np.hstack([np.eye(2), np.zeros((2, 1))])
        flow = FlowModel(MlpModel([3, 2], [w], [np.zeros(2)]), 2)
        z = np.array([[1.0, -2.0]])
        exact = z * (1 - math.exp(-1.0))  # z(s) = z e^(s-1); average of v over [0, 1]
        errs = [np.max(np.abs(mean_velocity_quadrature_oracle(flow, z, 0.0, 1.0, n) - exact)) for n in (100, 1000)]
        assert errs[1] < errs[0] and errs[0] <= 2.0 / 100 and errs[1] <= 2.0 / 1000


class TestTraining:
    def test_straight_couplings_recover_shift(self):
        rng = np.random.default_rng(0)
        c = np.array([3.0, -1.0])
        x = rng.normal(size=(4000, 2))
        cs = CouplingSet(x, x + c)
        res = train_meanflow(cs, NetSpec((32, 32)), 2000, 256, TimeSamplerConfig(), LossConfig(), rng)
        g = np.linspace(-1.5, 1.5, 5)
        worst = 0.0
        for t in (0.2, 0.6, 1.0):
            for r in (0.0, 0.5 * t, t):
                for gx in g:
                    for gy in g:
                        zt = np.array([[gx, gy]]) + t * c
                        worst = max(worst, np.linalg.norm(res.model.mean_velocity(zt, r, t)[0] - c))
        assert worst <= 0.05
        z = x[:100] + c
        np.testing.assert_allclose(one_step_sample(res.model, z), x[:100], atol=0.05)

    def test_single_coupling_overfits(self):
        cs = CouplingSet(np.array([[1.0, 2.0]]), np.array([[-1.0, 0.5]]))
        res = train_meanflow(cs, NetSpec((16,)), 1500, 32, TimeSamplerConfig(), LossConfig(),
                             np.random.default_rng(1))
        assert res.loss_trace[-100:].mean() < 1e-3 * res.loss_trace[:10].mean()

    def test_guided_two_stage_and_ledger(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 2))
        cs = CouplingSet(x, x + 1.0, rng.integers(0, 2, 500))
        led = BudgetLedger()
        res = train_meanflow(cs, NetSpec((16,)), 40, 32, TimeSamplerConfig(), LossConfig(), rng,
                             cfg_cfg=CfgConfig(), ledger=led)
        assert res.model.n_classes == 2 and res.model.supports_unconditional
        pc = led.phases["stage3_train"]
        assert pc.train_steps == 40
        assert pc.forward_evals == 20 * 32 + 20 * 3 * 32
        assert pc.backward_evals == 40 * 2 * 32

    def test_guided_needs_labels(self):
        cs = CouplingSet(np.zeros((4, 2)), np.ones((4, 2)))
        with pytest.raises(ConfigError):
            train_meanflow(cs, NetSpec((8,)), 5, 4, TimeSamplerConfig(), LossConfig(), np.random.default_rng(0),
                           cfg_cfg=CfgConfig())

    def test_empty_couplings(self):
        with pytest.raises(ValueError):
            train_meanflow(CouplingSet(np.zeros((0, 2)), np.zeros((0, 2))), NetSpec((8,)), 5, 4,
                           TimeSamplerConfig(), LossConfig(), np.random.default_rng(0))
