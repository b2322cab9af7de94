import math
import struct

import numpy as np
import pytest

from reflowlab.budget import BudgetLedger
from reflowlab.dist2d import default_toy_task, single_gaussian_task
from reflowlab.errors import NonFiniteError, SchemaError
from reflowlab.nncore import AdamConfig, MlpModel, NetSpec
from reflowlab.rectflow import (
    CouplingSet,
    FlowModel,
    empirical_lipschitz,
    export_couplings_csv,
    generate_couplings,
    integrate_ode,
    load_couplings,
    nearest_rank_threshold,
    path_deviation,
    save_couplings,
    straightness_deviation,
    train_rectified_flow,
    truncate_by_distance,
)


def constant_flow(c, dim=2):
    c = np.asarray(c, dtype=float)
    net = MlpModel([dim + 1, dim], [np.zeros((dim, dim + 1))], [c.copy()])
    return FlowModel(net, dim)


def linear_flow(scale=1.0, dim=2):
    """v(z, t) = scale * z."""
    w = np.hstack([scale * np.eye(dim), np.zeros((dim, 1))])
    return FlowModel(MlpModel([dim + 1, dim], [w], [np.zeros(dim)]), dim)


def nan_flow(dim=2):
    return FlowModel(MlpModel([dim + 1, dim], [np.zeros((dim, dim + 1))], [np.full(dim, np.nan)]), dim)


class TestIntegrate:
    def test_constant_field_one_step(self):
        z = np.array([[1.0, 2.0], [-3.0, 0.5]])
        out = integrate_ode(constant_flow([0.5, -1.0]), z, 1)
        np.testing.assert_allclose(out, z - np.array([0.5, -1.0]))

    def test_linear_field_euler_closed_form(self):
        z = np.array([[1.0, -2.0]])
        n = 1000
        out = integrate_ode(linear_flow(), z, n)
        np.testing.assert_allclose(out, z * (1 - 1 / n) ** n, rtol=1e-12)
        assert np.max(np.abs(out - z / math.e)) <= 1e-3

    def test_heun_second_order(self):
        z = np.array([[1.0, 0.5]])
        exact = z / math.e
        errs = {n: np.max(np.abs(integrate_ode(linear_flow(), z, n, "heun") - exact)) for n in (10, 20, 40)}
        for n in (10, 20):
            assert errs[n] / errs[2 * n] == pytest.approx(4.0, rel=0.2)

    def test_data_to_noise_reverses_sign(self):
        z = np.array([[0.0, 0.0]])
        out = integrate_ode(constant_flow([1.0, 2.0]), z, 3, direction="data_to_noise")
        np.testing.assert_allclose(out, [[1.0, 2.0]])

    def test_nfe_accounting(self):
        z = np.zeros((7, 2))
        for solver, mult in (("euler", 1), ("heun", 2)):
            led = BudgetLedger()
            integrate_ode(constant_flow([1.0, 0.0]), z, 13, solver, ledger=led)
            assert led.forward_evals == 13 * 7 * mult == led.phases["eval"].forward_evals

    def test_non_finite_reports_step(self):
        with pytest.raises(NonFiniteError) as info:
            integrate_ode(nan_flow(), np.zeros((2, 2)), 5)
        assert info.value.step == 0

    def test_steps_precondition(self):
        with pytest.raises(ValueError):
            integrate_ode(constant_flow([0, 0]), np.zeros((1, 2)), 0)

    def test_round_trip_linear(self):
        z = np.random.default_rng(0).normal(size=(20, 2))
        model = linear_flow(0.3)
        errs = []
        for steps in (25, 100, 400):
            fwd = integrate_ode(model, z, steps, direction="data_to_noise")
            back = integrate_ode(model, fwd, steps, direction="noise_to_data")
            errs.append(np.max(np.abs(back - z)))
        assert errs[1] <= 0.05 and errs[0] > errs[1] > errs[2]


class TestCouplings:
    def test_zero_field_identity(self):
        cs = generate_couplings(constant_flow([0.0, 0.0]), default_toy_task(), 100, 5, "euler", 0)
        np.testing.assert_array_equal(cs.x, cs.z)
        assert np.all(cs.distance == 0)

    def test_constant_field_shift(self):
        c = np.array([3.0, 4.0])
        cs = generate_couplings(constant_flow(c), default_toy_task(), 100, 4, "heun", 0)
        np.testing.assert_allclose(cs.z, cs.x + c, atol=1e-12)
        np.testing.assert_allclose(cs.distance, 5.0)

    def test_worker_invariance_and_reproducibility(self):
        model = linear_flow(0.2)
        task = default_toy_task(conditional=True)
        a = generate_couplings(model, task, 9000, 6, "euler", 42, workers=1, chunk_size=1000)
        b = generate_couplings(model, task, 9000, 6, "euler", 42, workers=4, chunk_size=1000)
        assert a.digest() == b.digest()
        assert a.cls is not None and set(np.unique(a.cls)) == {0, 1}

    def test_failed_pairs_dropped(self):
        cs = generate_couplings(nan_flow(), default_toy_task(), 10, 2, "euler", 0)
        assert len(cs) == 0 and cs.provenance["n_failed"] == 10

    def test_ledger_charged(self):
        led = BudgetLedger()
        generate_couplings(constant_flow([0, 0]), default_toy_task(), 50, 8, "heun", 0, ledger=led)
        assert led.phases["reflow_sampling"].forward_evals == 50 * 8 * 2

    def test_distance_invariant(self):
        rng = np.random.default_rng(0)
        cs = CouplingSet(rng.normal(size=(30, 2)), rng.normal(size=(30, 2)))
        for i in range(len(cs)):
            c = cs[i]
            assert abs(c.distance - np.linalg.norm(c.x - c.z)) <= 1e-9

    def test_binary_file_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        cs = CouplingSet(rng.normal(size=(11, 2)), rng.normal(size=(11, 2)), rng.integers(0, 2, 11),
                         provenance={"generator": "abc", "solver": "euler", "steps": 3, "seed": 1})
        path = save_couplings(tmp_path / "c.rmfc", cs)
        raw = path.read_bytes()
        assert raw[:4] == b"RMFC"
        version, n, d, has_class = struct.unpack("<IQIB", raw[4:21])
        assert (version, n, d, has_class) == (1, 11, 2, 1)
        assert len(raw) == 21 + 11 * (2 * 2 * 8 + 4 + 8)
        back = load_couplings(path)
        assert back.digest() == cs.digest()
        assert back.provenance["generator"] == "abc"
        csv = export_couplings_csv(tmp_path / "c.csv", cs).read_text().splitlines()
        assert csv[0] == "x0,x1,z0,z1,class,distance" and len(csv) == 12

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.rmfc"
        p.write_bytes(b"NOPE" + bytes(30))
        with pytest.raises(SchemaError):
            load_couplings(p)


def brute_force_percentile(distances, k):
    """Smallest value v with count(d <= v) >= (100 - k)% of n, scanning a full sort."""
    s = sorted(distances)
    n = len(s)
    need = (100 - k) * n / 100
    for v in s:
        if sum(1 for d in s if d <= v) >= need - 1e-9:
            return v
    return s[-1]


class TestTruncation:
    def make(self, d):
        d = np.asarray(d, dtype=float)
        x = np.zeros((len(d), 2))
        z = np.stack([d, np.zeros_like(d)], axis=1)
        return CouplingSet(x, z)

    def test_one_to_ten(self):
        cs = self.make(np.arange(1, 11))
        out = truncate_by_distance(cs, 10)
        np.testing.assert_allclose(np.sort(out.distance), np.arange(1, 10))
        assert out.provenance["truncated"] and not cs.provenance.get("truncated")
        assert len(cs) == 10

    def test_k_zero_identity(self):
        cs = self.make(np.random.default_rng(0).exponential(size=100))
        out = truncate_by_distance(cs, 0)
        assert out.digest() == cs.digest()

    def test_errors(self):
        with pytest.raises(ValueError):
            truncate_by_distance(self.make([]), 10)
        with pytest.raises(ValueError):
            truncate_by_distance(self.make([1.0]), 100)

    def test_small_arrays_against_scan(self):
        rng = np.random.default_rng(3)
        for _ in range(300):
            n = int(rng.integers(1, 40))
            d = rng.integers(0, 6, size=n).astype(float)  # plenty of ties
            k = float(rng.choice([0, 5, 10, 12.5, 33, 50, 99]))
            assert nearest_rank_threshold(d, k) == brute_force_percentile(list(d), k)

    def test_exponential_kept_fraction(self):
        d = np.random.default_rng(4).exponential(size=100_000)
        out = truncate_by_distance(self.make(d), 10)
        assert abs(len(out) / 1e5 - 0.90) <= 0.001
        assert out.distance.max() <= np.sort(d)[89_999]


class TestDiagnostics:
    def test_lipschitz_identity_and_scaling(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(200, 2))
        assert empirical_lipschitz(CouplingSet(x, x.copy()), 500, rng) == pytest.approx(1.0)
        assert empirical_lipschitz(CouplingSet(x, 2 * x), 500, rng) == pytest.approx(0.5)

    def test_straightness_constant_field(self):
        z = np.random.default_rng(0).normal(size=(10, 2))
        assert straightness_deviation(constant_flow([1.0, -1.0]), z, 20) == pytest.approx(0.0, abs=1e-12)

    def test_quarter_circle_geometry(self):
        radius, n = 2.5, 41
        theta = np.linspace(0.0, np.pi / 2, n)
        states = radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        # distance from an arc point to the chord x + y = R, divided by the chord length R * sqrt(2)
        direct = np.abs(states.sum(axis=1) - radius) / np.sqrt(2)
        want = direct[1:-1].mean() / (radius * np.sqrt(2))
        assert path_deviation(states) == pytest.approx(want, rel=1e-12)
        # the midpoint sagitta: R (1 - cos(pi/4))
        mid = direct[n // 2]
        assert mid == pytest.approx(radius * (1 - np.cos(np.pi / 4)), rel=1e-12)

    def test_zero_chord(self):
        states = np.array([[0.0, 0.0], [1.0, 1.0], [0.0, 0.0]])
        assert path_deviation(states) == 0.0


class TestTraining:
    def test_rejects_bad_budget(self):
        with pytest.raises(ValueError):
            train_rectified_flow(default_toy_task(), NetSpec((8,)), 0, 16, AdamConfig(), np.random.default_rng(0))

    def test_loss_falls_and_ledger(self):
        led = BudgetLedger()
        res = train_rectified_flow(single_gaussian_task(), NetSpec((32, 32)), 400, 256, AdamConfig(),
                                   np.random.default_rng(0), ledger=led)
        assert res.loss_trace[-50:].mean() < res.loss_trace[:50].mean()
        assert led.phases["stage1_train"].train_steps == 400
        assert led.phases["stage1_train"].forward_evals == 400 * 256

    def test_deterministic(self):
        args = (default_toy_task(), NetSpec((16,)), 50, 64, AdamConfig())
        a = train_rectified_flow(*args, np.random.default_rng(3))
        b = train_rectified_flow(*args, np.random.default_rng(3))
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.model.net.params(), b.model.net.params()))

    def test_conditional_flow_shapes(self):
        res = train_rectified_flow(default_toy_task(conditional=True), NetSpec((16,)), 20, 32, AdamConfig(),
                                   np.random.default_rng(0))
        assert res.model.n_classes == 2 and res.model.net.in_dim == 5
        out = res.model.velocity(np.zeros((3, 2)), 0.5, np.array([0, 1, -1]))
        assert out.shape == (3, 2)
