import numpy as np
import pytest

import geoflow.distill as distill_mod
from geoflow.density import ConditionedDensity, GuidedField
from geoflow.distill import (
    DistillBatch,
    DistillConfig,
    DistillDivergence,
    distill_run,
    smoothed_action,
    student_faithfulness,
    student_loss,
    student_step,
    student_targets,
    teacher_gradient,
    teacher_step,
    time_sampler,
    time_weights,
)
from geoflow.geodesic import DiscretePath, action, optimize_path, pointwise_functional_derivative, resample_constant_speed
from geoflow.metrics import el_residual_curve, interpolant_nodes
from geoflow.nets import CorrectorNet, corrector_eval
from geoflow.optim import SGD
from geoflow.rng import make_rng
from geoflow.tasks import bridge_density, make_gmm_bridge_task, make_offset_task

from conftest import randomize

BRIDGE = bridge_density()
FLAT = ConditionedDensity.flat()


def small_cfg(**kw):
    base = dict(tau=0.3, teacher_lr=1e-2, student_lr=3e-3, hidden=(16, 16), student_optimizer="adam", epochs=5)
    base.update(kw)
    return DistillConfig(**base)


def bridge_batch(n, cfg, seed=0):
    ds = make_gmm_bridge_task(n, BRIDGE, make_rng(seed, 3))
    return DistillBatch.build(BRIDGE, ds.x0, ds.x1, ds.c0, ds.c1, cfg)


@pytest.fixture(scope="module")
def trained():
    cd = BRIDGE
    ds = make_gmm_bridge_task(80, cd, make_rng(0, 3))
    tr, te = ds.split(64)
    cfg = DistillConfig(tau=0.3, teacher_lr=1e-2, student_lr=3e-3, epochs=100, hidden=(64, 64),
                        student_optimizer="adam", batch_size=16)
    return distill_run(tr, cd, cfg), cfg, tr, te


class TestTimeSampler:
    def test_single(self):
        assert time_sampler(1, jitter=False) == pytest.approx([0.5])
        t = time_sampler(1, make_rng(0))
        assert 0 < t[0] < 1

    def test_grid(self):
        np.testing.assert_allclose(time_sampler(3, jitter=False), [0.25, 0.5, 0.75])

    def test_interior_and_stratified(self):
        rng = make_rng(1)
        for n in (1, 2, 5, 17):
            for _ in range(50):
                t = time_sampler(n, rng)
                assert np.all((t > 0) & (t < 1))
                assert np.all(np.diff(t) > 0)

    def test_weights_sum_to_one(self):
        for n in (1, 4, 9):
            assert time_weights(n).sum() == pytest.approx(1.0)
            assert time_weights(n, jitter=False).sum() == pytest.approx(1.0)

    def test_jitter_needs_rng(self):
        with pytest.raises(ValueError):
            time_sampler(3)


class TestConfig:
    def test_validation(self):
        for bad in (dict(tau=0.0), dict(tau=1.0), dict(t_grid_size=0), dict(mode="mixed"), dict(projection="x")):
            with pytest.raises(ValueError):
                DistillConfig(**bad)


class TestTeacher:
    def test_flat_zero_teacher(self):
        cfg = small_cfg()
        ds = make_offset_task(6, [2.0, 1.0], make_rng(0))
        batch = DistillBatch.build(FLAT, ds.x0, ds.x1, ds.c0, ds.c1, cfg)
        teacher = CorrectorNet.create(2, (16, 16))
        before = teacher.params.copy()
        rep = teacher_step(teacher, FLAT, batch, cfg, rng=make_rng(0))
        assert rep.loss == 0.0 and rep.g_norm == 0.0
        np.testing.assert_array_equal(teacher.params, before)

    def test_explicit_update_one_hidden_unit(self, rng):
        cfg = small_cfg(hidden=(1,), jitter=False, t_grid_size=4)
        batch = bridge_batch(3, cfg)
        teacher = randomize(CorrectorNet.create(2, (1,)), rng, 0.3)
        xi = teacher.params.copy()
        lr = 1e-3
        t = time_sampler(4, jitter=False)
        n, T = len(batch), len(t)

        # frozen g from finite-difference kinematics of the interpolant
        z0, z1 = np.repeat(batch.z0, T, 0), np.repeat(batch.z1, T, 0)
        c0, c1 = np.repeat(batch.c0, T, 0), np.repeat(batch.c1, T, 0)
        tt = np.tile(t, n)
        h = 1e-4

        def z_at(s):
            return (1 - s)[:, None] * z0 + s[:, None] * z1 + corrector_eval(teacher, z0, z1, s)

        z = z_at(tt)
        vel = (z_at(tt + h) - z_at(tt - h)) / (2 * h)
        acc = (z_at(tt + h) - 2 * z + z_at(tt - h)) / h**2
        ct = (1 - tt)[:, None] * c0 + tt[:, None] * c1
        field = GuidedField(BRIDGE, cfg.beta, float(BRIDGE.schedule.alpha_bar(cfg.tau)), ct)
        g = pointwise_functional_derivative(vel, acc, field.score(z), np.exp(-field.log_density(z)))

        # hand-written Jacobian of z_t with respect to the 10 parameters
        w1, b1, w2 = xi[:5], xi[5], xi[6:8]
        inp = np.concatenate([z0, z1, tt[:, None]], axis=1)
        a = inp @ w1 + b1
        sig = 1 / (1 + np.exp(-a))
        act, dact = a * sig, sig * (1 + a * (1 - sig))
        q = tt * (1 - tt)
        J = np.zeros((n * T, 2, 10))
        J[:, :, :5] = (q * dact)[:, None, None] * w2[None, :, None] * inp[:, None, :]
        J[:, :, 5] = (q * dact)[:, None] * w2[None, :]
        J[:, 0, 6] = J[:, 1, 7] = q * act
        J[:, 0, 8] = J[:, 1, 9] = q
        grad = np.einsum("rij,ri->j", J, g) / (n * T)
        expected = xi - lr * grad

        _, got_grad, _, _ = teacher_gradient(teacher, BRIDGE, batch, cfg, t)
        np.testing.assert_allclose(got_grad, grad, rtol=1e-5, atol=1e-9)
        teacher_step(teacher, BRIDGE, batch, cfg, optimizer=SGD(lr, None))
        np.testing.assert_allclose(teacher.params, expected, rtol=1e-6, atol=1e-12)

    def test_stop_gradient_scaling(self, rng, monkeypatch):
        cfg = small_cfg(jitter=False)
        batch = bridge_batch(4, cfg)
        teacher = randomize(CorrectorNet.create(2, (16, 16)), rng, 0.1)
        t = time_sampler(cfg.t_grid_size, jitter=False)
        _, g1, _, _ = teacher_gradient(teacher, BRIDGE, batch, cfg, t)
        real = distill_mod.pointwise_functional_derivative
        monkeypatch.setattr(distill_mod, "pointwise_functional_derivative", lambda *a: 2.0 * real(*a))
        _, g2, _, _ = teacher_gradient(teacher, BRIDGE, batch, cfg, t)
        np.testing.assert_allclose(g2, 2.0 * g1, rtol=1e-13, atol=0)
        cos = g1 @ g2 / (np.linalg.norm(g1) * np.linalg.norm(g2))
        assert abs(cos - 1.0) < 1e-12

    def test_steps_lower_smoothed_action(self):
        cfg = small_cfg()
        batch = bridge_batch(8, cfg)
        teacher = CorrectorNet.create(2, (16, 16))
        linear = smoothed_action(teacher, BRIDGE, batch, cfg)
        opt = SGD(cfg.teacher_lr, cfg.clip)
        rng = make_rng(0)
        for _ in range(30):
            teacher_step(teacher, BRIDGE, batch, cfg, opt, rng)
        assert smoothed_action(teacher, BRIDGE, batch, cfg) < linear


class TestStudent:
    def test_zero_student_initial_loss(self, rng):
        cfg = small_cfg(jitter=False)
        batch = bridge_batch(5, cfg)
        teacher = randomize(CorrectorNet.create(2, (16, 16)), rng, 0.2)
        student = CorrectorNet.create(2, (16, 16))
        t = time_sampler(cfg.t_grid_size, jitter=False)
        targets = student_targets(teacher, BRIDGE, batch, cfg, t)
        x0, x1 = np.repeat(batch.x0, len(t), 0), np.repeat(batch.x1, len(t), 0)
        tt = np.tile(t, len(batch))
        lerp = (1 - tt)[:, None] * x0 + tt[:, None] * x1
        expected = np.mean(np.sum((lerp - targets) ** 2, axis=1))
        rep = student_step(student, teacher, BRIDGE, batch, cfg, t=t)
        assert rep.loss == pytest.approx(expected, rel=1e-13)

    def test_flat_targets_are_linear(self):
        cfg = small_cfg(jitter=False)
        ds = make_offset_task(5, [2.0, -1.0], make_rng(0))
        batch = DistillBatch.build(FLAT, ds.x0, ds.x1, ds.c0, ds.c1, cfg)
        teacher = CorrectorNet.create(2, (16, 16))
        student = CorrectorNet.create(2, (16, 16))
        t = time_sampler(cfg.t_grid_size, jitter=False)
        targets = student_targets(teacher, FLAT, batch, cfg, t)
        assert student_loss(student, targets, batch, t) < 1e-4

    def test_boundaries_exact(self, trained):
        r, _, tr, _ = trained
        for t in (0.0, 1.0):
            x = (1 - t) * tr.x0 + t * tr.x1 + corrector_eval(r.student, tr.x0, tr.x1, np.full(len(tr), t))
            np.testing.assert_array_equal(x, tr.x0 if t == 0 else tr.x1)


class TestRun:
    def test_flat_fixed_point(self):
        ds = make_offset_task(12, [2.0, 1.0], make_rng(0))
        # plain gradient descent; Adam's scale invariance turns roundoff into lr-sized steps
        r = distill_run(ds, FLAT, small_cfg(epochs=3, batch_size=4, student_optimizer="sgd"))
        assert np.max(np.abs(r.teacher.params - CorrectorNet.create(2, (16, 16)).params)) == 0.0
        x = interpolant_nodes(r.student, ds.x0[0], ds.x1[0], 32)
        np.testing.assert_allclose(x, interpolant_nodes(None, ds.x0[0], ds.x1[0], 32), atol=1e-3)

    def test_deterministic_history(self):
        ds = make_gmm_bridge_task(12, BRIDGE, make_rng(0))
        cfg = small_cfg(epochs=3, batch_size=4)
        a = distill_run(ds, BRIDGE, cfg)
        b = distill_run(ds, BRIDGE, cfg)
        assert np.array(a.history_rows()).tobytes() == np.array(b.history_rows()).tobytes()
        assert a.student.params.tobytes() == b.student.params.tobytes()

    def test_phased_mode(self, tmp_path):
        ds = make_gmm_bridge_task(8, BRIDGE, make_rng(0))
        r = distill_run(ds, BRIDGE, small_cfg(epochs=2, mode="phased"))
        assert [h["epoch"] for h in r.history] == [0, 1, 2, 3, 4]
        r.write_history(tmp_path / "h.csv")
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "epoch,teacher_loss,student_loss,action,residual"

    def test_divergence_watchdog(self, monkeypatch):
        real = distill_mod.pointwise_functional_derivative
        monkeypatch.setattr(distill_mod, "pointwise_functional_derivative", lambda *a: -real(*a))
        ds = make_gmm_bridge_task(8, BRIDGE, make_rng(0))
        with pytest.raises(DistillDivergence) as ei:
            distill_run(ds, BRIDGE, small_cfg(epochs=30, line_search=False))
        assert len(ei.value.history) == 10

    def test_empty(self):
        ds = make_gmm_bridge_task(4, BRIDGE, make_rng(0)).subset(np.zeros(0, dtype=int))
        with pytest.raises(ValueError):
            distill_run(ds, BRIDGE, small_cfg())

    def test_action_non_increasing(self, trained):
        r = trained[0]
        a = [h["action"] for h in r.history]
        assert all(y <= x for x, y in zip(a, a[1:]))
        assert a[-1] < a[0]

    def test_faithfulness(self, trained):
        r, cfg, tr, _ = trained
        batch = DistillBatch.build(BRIDGE, tr.x0, tr.x1, tr.c0, tr.c1, cfg)
        assert student_faithfulness(r.student, r.teacher, BRIDGE, batch, cfg, np.linspace(0.05, 0.95, 19)) < 5e-2
        s = [h["student_loss"] for h in r.history]
        assert s[10] < s[0]

    def test_residual_curve_below_linear(self, trained):
        r, _, _, te = trained
        m = BRIDGE.conditional
        t = np.linspace(0.1, 0.9, 9)
        student, _ = el_residual_curve(r.student, m, (te.x0, te.x1), t)
        linear, _ = el_residual_curve(None, m, (te.x0, te.x1), t)
        assert np.mean(student <= linear) >= 0.8

    def test_student_action_near_node_geodesic(self, trained):
        r, _, _, te = trained
        m = BRIDGE.conditional
        ratios = []
        for i in range(4):
            nodes = interpolant_nodes(r.student, te.x0[i], te.x1[i], 64)
            student = action(resample_constant_speed(DiscretePath(nodes)), m)
            node = optimize_path(DiscretePath.linear(te.x0[i], te.x1[i], 64), m).history[-1]
            ratios.append(student / node)
        assert max(ratios) < 1.10
