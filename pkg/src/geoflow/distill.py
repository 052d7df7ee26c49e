"""Teacher/student geodesic distillation.

The teacher corrector bends interpolants between smoothed endpoints
``z0, z1`` toward density geodesics of the guided smoothed density, using the
stop-gradient surrogate ``mean_t <stop(g_t), z_t>`` whose parameter gradient
is the action gradient.  The student corrector learns the same paths in data
space by regressing onto backward probability-flow images of the teacher's
interpolants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .density import ConditionedDensity, GuidedField, NumericalError, pf_ode_backward, pf_ode_forward
from .geodesic import pointwise_el_residual, pointwise_functional_derivative
from .metrics import interpolant_residual
from .nets import CorrectorNet, corrector_eval, corrector_jet, corrector_on_tape
from .optim import make_optimizer
from .persistence import write_csv
from .rng import make_rng

HISTORY_COLUMNS = ("epoch", "teacher_loss", "student_loss", "action", "residual")


@dataclass
class DistillConfig:
    tau: float = 0.6
    beta: float = 1.0
    t_grid_size: int = 8
    teacher_lr: float = 1e-6
    student_lr: float = 1e-3
    epochs: int = 50
    ode_steps: int = 30
    batch_size: int = 0  # 0 means the whole dataset
    teacher_optimizer: str = "sgd"
    student_optimizer: str = "sgd"
    clip: float = 10.0
    projection: str = "full-funcderiv"
    jitter: bool = True
    mode: str = "alternating"  # or "phased"
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "silu"
    monitor_grid: int = 33
    monitor_pairs: int = 16
    line_search: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.t_grid_size < 1 or self.epochs < 0 or self.ode_steps < 1:
            raise ValueError("t_grid_size, ode_steps must be >= 1 and epochs >= 0")
        if self.mode not in ("alternating", "phased"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.projection not in ("full-funcderiv", "rescaled"):
            raise ValueError(f"unknown projection {self.projection!r}")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class DistillBatch:
    x0: np.ndarray
    x1: np.ndarray
    z0: np.ndarray
    z1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray

    def __len__(self) -> int:
        return self.x0.shape[0]

    @classmethod
    def build(cls, cd: ConditionedDensity, x0, x1, c0, c1, cfg: DistillConfig) -> "DistillBatch":
        """Smoothed endpoints are forward probability-flow images under each endpoint's condition."""
        x0, x1 = np.atleast_2d(x0).astype(np.float64), np.atleast_2d(x1).astype(np.float64)
        c0, c1 = np.atleast_2d(c0).astype(np.float64), np.atleast_2d(c1).astype(np.float64)
        z0 = pf_ode_forward(cd, x0, c0, cfg.tau, cfg.ode_steps)
        z1 = pf_ode_forward(cd, x1, c1, cfg.tau, cfg.ode_steps)
        return cls(x0, x1, z0, z1, c0, c1)

    def subset(self, idx) -> "DistillBatch":
        return DistillBatch(self.x0[idx], self.x1[idx], self.z0[idx], self.z1[idx], self.c0[idx], self.c1[idx])


@dataclass
class TeacherReport:
    loss: float
    g_norm: float
    action_before: float
    action_after: float
    degenerate: int


@dataclass
class StudentReport:
    loss: float


def strata(n: int) -> np.ndarray:
    """Boundaries of the ``n`` strata around the grid ``j / (n + 1)``.

    Cells are centred on the grid points; the first and last cells extend to
    0 and 1 so the strata partition the unit interval.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    inner = (np.arange(1, n) + 0.5) / (n + 1.0)
    return np.concatenate([[0.0], inner, [1.0]])


def time_sampler(n: int, rng: np.random.Generator | None = None, jitter: bool = True) -> np.ndarray:
    """Stratified interior times: grid ``j / (n + 1)``, or one uniform draw per stratum."""
    b = strata(n)
    if not jitter:
        return np.arange(1, n + 1) / (n + 1.0)
    if rng is None:
        raise ValueError("jittered sampling needs an rng")
    t = b[:-1] + rng.uniform(size=n) * np.diff(b)
    # open interval: a draw of exactly 0 is nudged to the smallest positive float
    return np.clip(t, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def time_weights(n: int, jitter: bool = True) -> np.ndarray:
    """Quadrature weights matching :func:`time_sampler` (stratum widths; uniform on the grid)."""
    return np.diff(strata(n)) if jitter else np.full(n, 1.0 / n)


def _rows(batch_x0, batch_x1, t):
    """Pair-major flattening: row ``i * T + j`` is pair i at time t_j."""
    n, T = batch_x0.shape[0], len(t)
    a = np.repeat(batch_x0, T, axis=0)
    b = np.repeat(batch_x1, T, axis=0)
    tt = np.tile(t, n)
    return a, b, tt


def _lerp(a, b, t):
    return (1.0 - t)[:, None] * a + t[:, None] * b


def _smoothed_field(cd: ConditionedDensity, cfg: DistillConfig, c0, c1, t) -> GuidedField:
    abar = float(cd.schedule.alpha_bar(cfg.tau))
    cond = None if c0.shape[1] == 0 else _lerp(c0, c1, t)
    return GuidedField(cd, cfg.beta, abar, cond)


def interpolant_jets(net: CorrectorNet, x0, x1, t):
    """Position, velocity and acceleration of ``lerp + phi`` at rows (x0_i, x1_i, t_i)."""
    phi, d1, d2 = corrector_jet(net, x0, x1, t)
    return _lerp(x0, x1, t) + phi, (x1 - x0) + d1, d2


def smoothed_action(teacher: CorrectorNet, cd: ConditionedDensity, batch: DistillBatch, cfg: DistillConfig) -> float:
    """Mean over pairs of the teacher interpolant's action under the guided smoothed density."""
    grid = np.linspace(0.0, 1.0, cfg.monitor_grid)
    z0, z1, t = _rows(batch.z0, batch.z1, grid)
    c0, c1, _ = _rows(batch.c0, batch.c1, grid)
    z, vel, _ = interpolant_jets(teacher, z0, z1, t)
    field_ = _smoothed_field(cd, cfg, c0, c1, t)
    f = (np.linalg.norm(vel, axis=1) * np.exp(-field_.log_density(z))).reshape(len(batch), -1)
    h = 1.0 / (cfg.monitor_grid - 1)
    return float(np.mean(h * (f.sum(axis=1) - 0.5 * (f[:, 0] + f[:, -1]))))


def teacher_gradient(teacher: CorrectorNet, cd: ConditionedDensity, batch: DistillBatch, cfg: DistillConfig, t, w=None):
    """Surrogate loss value, its parameter gradient, mean |g| and degenerate-row count.

    The loss is ``mean_pairs sum_j w_j <stop(g_j), z_j>``; ``w`` defaults to
    equal weights ``1 / len(t)``.
    """
    z0, z1, tt = _rows(batch.z0, batch.z1, t)
    c0, c1, _ = _rows(batch.c0, batch.c1, t)
    z, vel, acc = interpolant_jets(teacher, z0, z1, tt)
    field_ = _smoothed_field(cd, cfg, c0, c1, tt)
    speed = np.linalg.norm(vel, axis=1)
    ok = speed > 1e-12 * max(1.0, float(np.max(speed, initial=0.0)))
    g = np.zeros_like(z)
    if np.any(ok):
        inv_p = np.exp(-field_.log_density(z[ok]))
        s = field_.score(z[ok])
        if cfg.projection == "full-funcderiv":
            g[ok] = pointwise_functional_derivative(vel[ok], acc[ok], s, inv_p)
        else:
            g[ok] = pointwise_functional_derivative(vel[ok], acc[ok], s, speed[ok])
    if not np.all(np.isfinite(g)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(g), axis=1))[0])
        raise NumericalError(f"non-finite functional derivative at t={tt[bad]:.6g} (row {bad})")
    w = np.full(len(t), 1.0 / len(t)) if w is None else np.asarray(w, dtype=np.float64)
    rw = np.tile(w, len(batch))[:, None] / len(batch)
    g_const = dc.stop(g * rw)

    def loss(pvar):
        phi = corrector_on_tape(teacher, pvar, z0, z1, tt)
        # lerp part carries no parameter dependence; its inner product is added as a constant
        return dc.vsum(phi * g_const)

    value, grad = dc.value_and_grad(loss, teacher.params)
    value += float(np.sum(g * rw * _lerp(z0, z1, tt)))
    return value, grad, float(np.mean(np.linalg.norm(g, axis=1))), int(np.sum(~ok))


def teacher_step(teacher, cd, batch, cfg, optimizer=None, rng=None) -> TeacherReport:
    """One update of the teacher on ``batch``; mutates ``teacher.params``."""
    rng = rng if rng is not None else make_rng(cfg.seed, 1)
    optimizer = optimizer or make_optimizer(cfg.teacher_optimizer, cfg.teacher_lr, cfg.clip)
    t = time_sampler(cfg.t_grid_size, rng, cfg.jitter)
    before = smoothed_action(teacher, cd, batch, cfg)
    value, grad, g_norm, degenerate = teacher_gradient(
        teacher, cd, batch, cfg, t, time_weights(cfg.t_grid_size, cfg.jitter)
    )
    teacher.params = optimizer.step(teacher.params, grad)
    after = smoothed_action(teacher, cd, batch, cfg)
    return TeacherReport(value, g_norm, before, after, degenerate)


def student_targets(teacher, cd, batch: DistillBatch, cfg: DistillConfig, t):
    """Backward probability-flow images of the teacher's ``z_t`` under ``c_t``."""
    z0, z1, tt = _rows(batch.z0, batch.z1, t)
    c0, c1, _ = _rows(batch.c0, batch.c1, t)
    z = _lerp(z0, z1, tt) + corrector_eval(teacher, z0, z1, tt)
    ct = _lerp(c0, c1, tt) if c0.shape[1] else None
    try:
        return pf_ode_backward(cd, z, ct, cfg.tau, cfg.ode_steps)
    except NumericalError as exc:
        raise NumericalError(f"{exc} (times {np.array2string(np.asarray(t), precision=4)})") from None


def student_loss(student, targets, batch: DistillBatch, t) -> float:
    x0, x1, tt = _rows(batch.x0, batch.x1, t)
    x = _lerp(x0, x1, tt) + corrector_eval(student, x0, x1, tt)
    return float(np.mean(np.sum((x - targets) ** 2, axis=1)))


def student_step(student, teacher, cd, batch, cfg, optimizer=None, rng=None, t=None) -> StudentReport:
    """One regression update of the student onto the teacher's backward-mapped interpolants."""
    if t is None:
        rng = rng if rng is not None else make_rng(cfg.seed, 2)
        t = time_sampler(cfg.t_grid_size, rng, cfg.jitter)
    optimizer = optimizer or make_optimizer(cfg.student_optimizer, cfg.student_lr, cfg.clip)
    targets = student_targets(teacher, cd, batch, cfg, t)
    x0, x1, tt = _rows(batch.x0, batch.x1, t)
    base = _lerp(x0, x1, tt) - targets
    rows = x0.shape[0]

    def loss(pvar):
        r = corrector_on_tape(student, pvar, x0, x1, tt) + base
        return dc.vsum(r * r) * (1.0 / rows)

    value, grad = dc.value_and_grad(loss, student.params)
    student.params = optimizer.step(student.params, grad)
    return StudentReport(value)


def student_residual(student, m, x0, x1, t_grid) -> np.ndarray:
    """Per-pair, per-t Euler-Lagrange residual of the student interpolant in data space."""
    a, b, tt = _rows(np.atleast_2d(x0), np.atleast_2d(x1), np.asarray(t_grid))
    x, vel, acc = interpolant_jets(student, a, b, tt)
    s = m.score(x) if m is not None else np.zeros_like(x)
    return pointwise_el_residual(vel, acc, s).reshape(a.shape[0] // len(t_grid), len(t_grid))


def student_faithfulness(student, teacher, cd, batch, cfg, t_grid) -> float:
    """Mean squared distance between student interpolants and backward-mapped teacher interpolants."""
    return student_loss(student, student_targets(teacher, cd, batch, cfg, t_grid), batch, t_grid)


class DistillDivergence(RuntimeError):
    def __init__(self, message: str, history: list[dict]):
        self.history = history
        super().__init__(message)


@dataclass
class DistillResult:
    teacher: CorrectorNet
    student: CorrectorNet
    history: list[dict] = field(default_factory=list)

    def history_rows(self):
        return [[h[k] for k in HISTORY_COLUMNS] for h in self.history]

    def write_history(self, path) -> None:
        write_csv(path, HISTORY_COLUMNS, self.history_rows())


def distill_run(pairs, cd: ConditionedDensity, cfg: DistillConfig, ambient=None) -> DistillResult:
    """Full teacher/student loop.

    ``pairs`` is anything with ``x0, x1, c0, c1`` row arrays.  ``ambient`` is
    the data-space density used for the residual monitor (defaults to the
    conditional mixture of ``cd`` with its own weights).

    ``alternating`` mode runs, for every minibatch, a teacher update followed by
    a student update; ``phased`` trains the teacher for all epochs first.  With
    ``line_search`` an epoch whose teacher update raises the monitored action is
    rolled back and the teacher step size halved; ten consecutive rejections
    abort with :class:`DistillDivergence`.
    """
    n = len(pairs.x0)
    if n == 0:
        raise ValueError("distillation needs a nonempty dataset")
    d = pairs.x0.shape[1]
    m_ambient = ambient if ambient is not None else cd.conditional
    if m_ambient is None:
        m_ambient = GuidedField(ConditionedDensity.flat())
    full = DistillBatch.build(cd, pairs.x0, pairs.x1, pairs.c0, pairs.c1, cfg)
    teacher = CorrectorNet.create(d, cfg.hidden, cfg.activation, seed=cfg.seed)
    student = CorrectorNet.create(d, cfg.hidden, cfg.activation, seed=cfg.seed + 1)
    rng = make_rng(cfg.seed, 7)
    t_opt = make_optimizer(cfg.teacher_optimizer, cfg.teacher_lr, cfg.clip)
    s_opt = make_optimizer(cfg.student_optimizer, cfg.student_lr, cfg.clip)
    bs = cfg.batch_size if cfg.batch_size > 0 else n
    monitor_t = time_sampler(cfg.t_grid_size, jitter=False)
    tw = time_weights(cfg.t_grid_size, cfg.jitter)

    history: list[dict] = []
    action = smoothed_action(teacher, cd, full, cfg)

    def record(epoch, tl, sl, act):
        k = min(n, cfg.monitor_pairs)
        res = float(np.mean(interpolant_residual(student, m_ambient, full.x0[:k], full.x1[:k])))
        history.append({"epoch": epoch, "teacher_loss": tl, "student_loss": sl, "action": act, "residual": res})

    record(0, float("nan"), student_faithfulness(student, teacher, cd, full, cfg, monitor_t), action)

    def teacher_epoch(order):
        losses = []
        for lo in range(0, n, bs):
            b = full.subset(order[lo : lo + bs])
            t = time_sampler(cfg.t_grid_size, rng, cfg.jitter)
            value, grad, _, _ = teacher_gradient(teacher, cd, b, cfg, t, tw)
            teacher.params = t_opt.step(teacher.params, grad)
            losses.append(value)
            if cfg.mode == "alternating":
                student_step(student, teacher, cd, b, cfg, s_opt, t=time_sampler(cfg.t_grid_size, rng, cfg.jitter))
        return float(np.mean(losses))

    def student_epoch(order):
        losses = []
        for lo in range(0, n, bs):
            b = full.subset(order[lo : lo + bs])
            losses.append(student_step(student, teacher, cd, b, cfg, s_opt, t=time_sampler(cfg.t_grid_size, rng, cfg.jitter)).loss)
        return float(np.mean(losses))

    rising = 0
    for epoch in range(1, cfg.epochs + 1):
        snap = teacher.params.copy()
        tl = teacher_epoch(rng.permutation(n))
        new_action = smoothed_action(teacher, cd, full, cfg)
        if cfg.line_search and new_action > action:
            new_action = _backtrack(teacher, snap, lambda: smoothed_action(teacher, cd, full, cfg), action)
        rising = rising + 1 if new_action > action else 0
        if rising >= 10:
            raise DistillDivergence(f"teacher action rose for 10 consecutive epochs (epoch {epoch})", history)
        action = new_action
        record(epoch, tl, student_faithfulness(student, teacher, cd, full, cfg, monitor_t), action)

    if cfg.mode == "phased":
        for k in range(cfg.epochs):
            student_epoch(rng.permutation(n))
            sl = student_faithfulness(student, teacher, cd, full, cfg, monitor_t)
            record(cfg.epochs + k + 1, float("nan"), sl, action)
    return DistillResult(teacher, student, history)


def _backtrack(net, start, objective, reference, halvings: int = 8) -> float:
    """Shrink the step from ``start`` until ``objective`` is at most ``reference``.

    Falls back to ``start`` itself (objective == reference) when no fraction of
    the step helps, which happens when a noisy minibatch direction is not a
    descent direction for the monitored action.
    """
    step = net.params - start
    for _ in range(halvings):
        step = 0.5 * step
        net.params = start + step
        value = objective()
        if value <= reference:
            return value
    net.params = start
    return reference
