"""The twelve acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line (visible without ``-s``).
Run just this file with ``pytest tests/test_acceptance.py``.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from geoflow.cli import main
from geoflow.density import ConditionedDensity, GaussianMixture, GuidedField, pf_ode_backward, pf_ode_forward
from geoflow.distill import DistillBatch, DistillConfig, student_faithfulness
from geoflow.flowmatch import FmConfig, sample, train_fm
from geoflow.geodesic import (
    DiscretePath,
    action,
    functional_derivative,
    grid_geodesic_oracle,
    optimize_path,
    path_derivatives,
)
from geoflow.metrics import endpoint_rmse, relative_log_prob
from geoflow.nets import CorrectorNet, corrector_eval, corrector_time_derivative, load_checkpoint
from geoflow.rng import make_rng
from geoflow.tasks import bridge_density, make_offset_task, plucker_embed
from geoflow.config import build_datasets, build_density, load_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def report(capsys, k, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {k:2d}: {detail}"
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


@pytest.fixture(scope="module")
def bridge_runs(tmp_path_factory):
    """Two full pipeline runs of the bridge config (criteria 4, 5 and 12)."""
    base = tmp_path_factory.mktemp("bridge")
    cfg = str(CONFIGS / "bridge.json")
    times = []
    for sub in ("a", "b"):
        t0 = time.perf_counter()
        assert main(["pipeline", "--config", cfg, "--out", str(base / sub)]) == 0
        times.append(time.perf_counter() - t0)
    return base / "a" / "bridge", base / "b" / "bridge", times


def test_criterion_01_functional_derivative(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    n = 2048
    worst = 0.0
    for _ in range(3):
        m = GaussianMixture(rng.dirichlet([2.0] * 3), rng.normal(0, 1.5, (3, 2)), rng.uniform(0.8, 2.0, (3, 2)))
        for _ in range(20):
            a, b = rng.normal(0, 1.5, 2), rng.normal(0, 1.5, 2)
            c1, c2 = rng.normal(0, 0.4, 2), rng.normal(0, 0.3, 2)
            t = np.linspace(0, 1, n + 1)[:, None]
            p = DiscretePath((1 - t) * a + t * b + np.sin(np.pi * t) * c1 + np.sin(2 * np.pi * t) * c2)
            g = functional_derivative(p, m)
            vel, _ = path_derivatives(p)
            j = int(rng.integers(n // 8, 7 * n // 8))
            u = vel[j] / np.linalg.norm(vel[j])
            bump = 1e-5 * np.array([-u[1], u[0]])
            plus, minus = p.nodes.copy(), p.nodes.copy()
            plus[j] += bump
            minus[j] -= bump
            fd = (action(DiscretePath(plus), m) - action(DiscretePath(minus), m)) / 2
            worst = max(worst, abs(fd - g[j] @ bump / n) / abs(fd))
    dt = time.perf_counter() - t0
    report(capsys, 1, worst < 1e-3 and dt < 10, f"max rel err {worst:.2e} over 60 paths, {dt:.1f}s")


def test_criterion_02_flat_fixed_point(capsys):
    t0 = time.perf_counter()
    flat = GuidedField(ConditionedDensity.flat())
    line = DiscretePath.linear([-1.3, 0.4], [2.2, -0.9], 64)
    gnorm = float(np.max(np.linalg.norm(functional_derivative(line, flat), axis=1)))
    out = optimize_path(line, flat)
    moved = float(np.max(np.abs(out.path.nodes - line.nodes)))
    dt = time.perf_counter() - t0
    ok = gnorm < 1e-8 and moved < 1e-8 and dt < 1
    report(capsys, 2, ok, f"|dS| {gnorm:.1e}, node change {moved:.1e}, {dt:.2f}s")


def test_criterion_03_oracle(capsys):
    t0 = time.perf_counter()
    m = GaussianMixture.isotropic([[-2.5, 0.0], [2.5, 0.0]], 0.9)
    x0, x1 = np.array([-2.5, -0.6]), np.array([2.5, 0.9])
    line = DiscretePath.linear(x0, x1, 64)
    out = optimize_path(line, m)
    _, oracle = grid_geodesic_oracle(m, x0, x1, ((-5.0, 5.0), (-4.0, 4.0)), 256)
    final, lin = out.history[-1], action(line, m)
    dt = time.perf_counter() - t0
    ok = final <= lin and abs(final / oracle - 1) < 0.05 and dt < 60
    report(capsys, 3, ok, f"action {final:.2f} vs linear {lin:.2f}, oracle {oracle:.2f} ({final / oracle - 1:+.2%}), {dt:.1f}s")


def test_criterion_04_residual_reduction(capsys, bridge_runs):
    root, _, times = bridge_runs
    s = json.loads((root / "summary.json").read_text())
    ratio = s["residual_student"] / s["residual_linear"]
    ok = ratio <= 0.5 and times[0] < 600
    report(capsys, 4, ok, f"student/linear mean residual {ratio:.3f} on held-out pairs, pipeline {times[0]:.0f}s")


def test_criterion_05_faithfulness(capsys, bridge_runs):
    root, _, _ = bridge_runs
    cfg = load_config(CONFIGS / "bridge.json")
    cd = build_density(cfg)
    _, test = build_datasets(cfg, cd)
    dcfg = cfg.distill.build(cfg.seed)
    teacher = load_checkpoint(root / "checkpoints" / "teacher.gfnc")
    student = load_checkpoint(root / "checkpoints" / "student.gfnc")
    batch = DistillBatch.build(cd, test.x0, test.x1, test.c0, test.c1, dcfg)
    mse = student_faithfulness(student, teacher, cd, batch, dcfg, np.linspace(0.02, 0.98, 49))
    rows = (root / "csv" / "distill_history.csv").read_text().splitlines()
    col = rows[0].split(",").index("action")
    act = [float(r.split(",")[col]) for r in rows[1:]]
    mono = all(b <= a for a, b in zip(act, act[1:]))
    report(capsys, 5, mse < 5e-2 and mono, f"held-out MSE {mse:.4f}, action {act[0]:.2f} -> {act[-1]:.2f} non-increasing={mono}")


def test_criterion_06_pf_ode_roundtrip(capsys):
    t0 = time.perf_counter()
    cd = bridge_density()
    rng = make_rng(6)
    labels = rng.integers(0, 2, 1000)
    c = np.eye(2)[labels]
    x = cd.conditional.means[labels] + 0.9 * rng.standard_normal((1000, 2))
    errs = {}
    for steps in (25, 50, 100):
        back = pf_ode_backward(cd, pf_ode_forward(cd, x, c, 0.6, steps), c, 0.6, steps)
        errs[steps] = float(np.max(np.linalg.norm(back - x, axis=1)))
    r1, r2 = errs[25] / errs[50], errs[50] / errs[100]
    dt = time.perf_counter() - t0
    # at least second order; the roundtrip is in fact third order
    ok = errs[50] < 1e-3 and min(r1, r2) > 3.5 and dt < 30
    report(capsys, 6, ok, f"max err {errs[50]:.1e} at 50 steps, halving ratios {r1:.2f} {r2:.2f}, {dt:.1f}s")


def test_criterion_07_forward_mode(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    h = 1e-4
    for k in range(20):
        net = CorrectorNet.create(2, (16, 16), "tanh" if k % 2 else "silu", seed=k)
        net.params = net.params + 0.5 * rng.standard_normal(net.params.shape)
        x0, x1 = rng.normal(size=(50, 2)), rng.normal(size=(50, 2))
        t = rng.uniform(0.01, 0.99, 50)
        d1 = corrector_time_derivative(net, x0, x1, t)
        fd = (corrector_eval(net, x0, x1, t + h) - corrector_eval(net, x0, x1, t - h)) / (2 * h)
        rel = np.linalg.norm(d1 - fd, axis=1) / np.linalg.norm(d1, axis=1)
        worst = max(worst, float(rel.max()))
    dt = time.perf_counter() - t0
    report(capsys, 7, worst < 1e-5 and dt < 5, f"max rel err {worst:.1e} over 1000 draws, {dt:.2f}s")


def test_criterion_08_linear_fm_offset(capsys):
    t0 = time.perf_counter()
    b = [1.5, -0.7]
    train = make_offset_task(2048, b, make_rng(0))
    test = make_offset_task(1000, b, make_rng(1))
    net, _ = train_fm(train, None, FmConfig(steps=6000, hidden=(16,), lr=1e-2, t_sampling="uniform"))
    r10 = endpoint_rmse(sample(net, test.x0, nfe=10).endpoint, test.x1)
    r100 = endpoint_rmse(sample(net, test.x0, nfe=100).endpoint, test.x1)
    dt = time.perf_counter() - t0
    ok = r10 < 1e-2 and r100 < 1e-2 and abs(r10 - r100) < 5e-3 and dt < 300
    report(capsys, 8, ok, f"rmse {r10:.2e} (NFE 10), {r100:.2e} (NFE 100), {dt:.0f}s")


def test_criterion_09_rotation_comparison(capsys, tmp_path):
    t0 = time.perf_counter()
    cfg = str(CONFIGS / "rotation.json")
    lin, geo = [], []
    for seed in range(5):
        assert main(["pipeline", "--config", cfg, "--seed", str(seed), "--out", str(tmp_path / f"s{seed}")]) == 0
        s = json.loads((tmp_path / f"s{seed}" / "rotation" / "summary.json").read_text())
        lin.append(s["endpoint_rmse_linear_nfe100"])
        geo.append(s["endpoint_rmse_geodesic_nfe100"])
    dt = time.perf_counter() - t0
    ok = np.mean(geo) <= np.mean(lin) and dt < 1800
    report(capsys, 9, ok, f"mean rmse geodesic {np.mean(geo):.4f} vs linear {np.mean(lin):.4f} (5 seeds, NFE 100), {dt:.0f}s")


def test_criterion_10_relative_log_prob(capsys):
    t0 = time.perf_counter()
    m = GaussianMixture.standard_normal(2)
    line = relative_log_prob(np.linspace([0.0, 0.0], [1.0, 0.0], 513), m)[-1]
    rng = np.random.default_rng(10)
    gmm = GaussianMixture(rng.dirichlet([2.0] * 3), rng.normal(0, 1.5, (3, 2)), rng.uniform(0.5, 1.5, (3, 2)))
    x0, x1 = np.array([-1.0, 0.5]), np.array([1.5, -0.2])
    t = np.linspace(0, 1, 513)[:, None]
    straight = (1 - t) * x0 + t * x1
    bent = straight + 0.8 * np.sin(np.pi * t) * np.array([0.2, 1.0])
    gap = abs(relative_log_prob(straight, gmm)[-1] - relative_log_prob(bent, gmm)[-1])
    dt = time.perf_counter() - t0
    ok = abs(line + 0.5) < 1e-4 and gap < 1e-3 and dt < 5
    report(capsys, 10, ok, f"straight value {line:.6f}, two-path gap {gap:.1e}, {dt:.2f}s")


def test_criterion_11_plucker(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    o, d = rng.normal(0, 3, (10_000, 3)), rng.normal(size=(10_000, 3))
    r = plucker_embed(o, d)
    orth = float(np.max(np.abs(np.sum(r[:, :3] * r[:, 3:], axis=1))))
    s = rng.normal(0, 3, (10_000, 1))
    shift = float(np.max(np.abs(plucker_embed(o + s * d, d) - r)))
    dt = time.perf_counter() - t0
    ok = orth < 1e-12 and shift < 1e-12 and dt < 1
    report(capsys, 11, ok, f"max |m.d| {orth:.1e}, max shift change {shift:.1e}, {dt:.3f}s")


def test_criterion_12_determinism(capsys, bridge_runs):
    a, b, _ = bridge_runs
    fa = {str(p.relative_to(a)): p.read_bytes() for p in sorted(a.rglob("*")) if p.is_file()}
    fb = {str(p.relative_to(b)): p.read_bytes() for p in sorted(b.rglob("*")) if p.is_file()}
    diff = [k for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)]
    report(capsys, 12, not diff and len(fa) > 0, f"{len(fa)} files compared, {len(diff)} differ")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
