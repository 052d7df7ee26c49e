"""Data-to-data conditional flow matching with linear or geodesic interpolants."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .density import NumericalError
from .nets import CorrectorNet, VelocityNet, corrector_jet, params_digest, velocity_eval, velocity_on_tape
from .optim import make_optimizer
from .persistence import write_csv
from .rng import make_rng


@dataclass
class FmConfig:
    interpolant: str = "linear"  # or "geodesic"
    sigma_min: float = 0.01
    lr: float = 1e-3
    steps: int = 2000
    batch: int = 256
    t_sampling: str = "lognormal"  # "uniform" or "discrete"
    t_grid: int = 10  # k for discrete-grid sampling
    source_aug_strength: float = 0.0
    geodesic_noise: bool = False  # add sigma_min noise in geodesic mode too
    optimizer: str = "adam"
    lr_schedule: str = "cosine"  # or "constant"
    clip: float = 10.0
    hidden: tuple[int, ...] = (128, 128)
    activation: str = "silu"
    seed: int = 0

    def __post_init__(self):
        if self.interpolant not in ("linear", "geodesic"):
            raise ValueError(f"unknown interpolant {self.interpolant!r}")
        if self.sigma_min < 0:
            raise ValueError("sigma_min must be >= 0")
        if self.t_sampling not in ("lognormal", "uniform", "discrete"):
            raise ValueError(f"unknown t_sampling {self.t_sampling!r}")
        if not 0.0 <= self.source_aug_strength <= 1.0:
            raise ValueError("source_aug_strength must lie in [0, 1]")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.steps < 0 or self.batch < 1 or self.t_grid < 1:
            raise ValueError("steps >= 0, batch >= 1 and t_grid >= 1 required")
        self.hidden = tuple(self.hidden)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class SampleReport:
    trajectory: list = field(default_factory=list)
    nfe: int = 0
    endpoint: np.ndarray | None = None

    def to_array(self) -> np.ndarray:
        return np.stack(self.trajectory)


def linear_interpolant(x0, x1, t, sigma_min: float = 0.0, rng: np.random.Generator | None = None):
    """``x_t = (1 - t) x0 + t x1 + sigma_min eps`` and target ``x1 - x0``."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    tc = t[..., None] if t.ndim and x0.ndim > 1 else t
    xt = (1.0 - tc) * x0 + tc * x1
    if sigma_min > 0:
        if rng is None:
            raise ValueError("sigma_min > 0 needs an rng")
        xt = xt + sigma_min * rng.standard_normal(xt.shape)
    return xt, x1 - x0


def geodesic_interpolant(student: CorrectorNet, x0, x1, t):
    """``x_t = lerp + phi`` and target ``x1 - x0 + d phi / dt``; exact at both ends."""
    phi, dphi, _ = corrector_jet(student, x0, x1, t)
    t = np.asarray(t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    tc = t[..., None] if t.ndim and x0.ndim > 1 else t
    return (1.0 - tc) * x0 + tc * x1 + phi, x1 - x0 + dphi


def source_augment(x0, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Cosine-schedule noising ``cos(s pi / 2) x0 + sin(s pi / 2) eps``."""
    if not 0.0 <= strength <= 1.0:
        raise ValueError("strength must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    if strength == 0.0:
        return x0.copy()
    a = 0.5 * np.pi * strength
    return np.cos(a) * x0 + np.sin(a) * rng.standard_normal(x0.shape)


def sample_times(n: int, cfg: FmConfig, rng: np.random.Generator) -> np.ndarray:
    """Training times: logistic of a standard normal, uniform, or the k grid midpoints."""
    if cfg.t_sampling == "lognormal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    if cfg.t_sampling == "uniform":
        return rng.uniform(size=n)
    k = cfg.t_grid
    return (rng.integers(0, k, size=n) + 0.5) / k


def cfm_loss(v: VelocityNet, x_t, t, c, u) -> float:
    """Mean over the batch of ``|v(x_t, t, c) - u|^2``."""
    pred = velocity_eval(v, x_t, t, c)
    return float(np.mean(np.sum((np.atleast_2d(pred) - np.atleast_2d(u)) ** 2, axis=-1)))


def cfm_loss_and_grad(v: VelocityNet, x_t, t, c, u):
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    rows = u.shape[0]

    def loss(pvar):
        r = velocity_on_tape(v, pvar, x_t, t, c) - u
        return dc.vsum(r * r) * (1.0 / rows)

    return dc.value_and_grad(loss, v.params)


def _cosine_lr(base: float, step: int, total: int) -> float:
    return base * 0.5 * (1.0 + np.cos(np.pi * step / max(total, 1)))


def train_fm(dataset, student: CorrectorNet | None, cfg: FmConfig, net: VelocityNet | None = None):
    """Fit a velocity net on paired data; returns ``(net, history)``.

    ``dataset`` needs ``x0, x1, cond`` row arrays.  In geodesic mode the
    frozen ``student`` supplies interpolants and targets; its parameters are
    never modified.  ``history`` is the per-step training loss.
    """
    if cfg.interpolant == "geodesic" and student is None:
        raise ValueError("geodesic mode needs a distilled student corrector")
    x0_all = np.asarray(dataset.x0, dtype=np.float64)
    x1_all = np.asarray(dataset.x1, dtype=np.float64)
    c_all = np.asarray(dataset.cond, dtype=np.float64).reshape(x0_all.shape[0], -1)
    n, d = x0_all.shape
    if n == 0:
        raise ValueError("empty dataset")
    if net is None:
        net = VelocityNet.create(d, c_all.shape[1], cfg.hidden, cfg.activation, seed=cfg.seed)
    digest = params_digest(student) if student is not None else None
    rng = make_rng(cfg.seed, 11)
    opt = make_optimizer(cfg.optimizer, cfg.lr, cfg.clip)
    bs = min(cfg.batch, n)
    history = []
    order = rng.permutation(n)
    pos = 0
    for step in range(cfg.steps):
        if pos + bs > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos : pos + bs]
        pos += bs
        x0, x1, c = x0_all[idx], x1_all[idx], c_all[idx]
        if cfg.source_aug_strength > 0:
            x0 = source_augment(x0, cfg.source_aug_strength, rng)
        t = sample_times(bs, cfg, rng)
        if cfg.interpolant == "linear":
            xt, u = linear_interpolant(x0, x1, t, cfg.sigma_min, rng)
        else:
            xt, u = geodesic_interpolant(student, x0, x1, t)
            if cfg.geodesic_noise and cfg.sigma_min > 0:
                xt = xt + cfg.sigma_min * rng.standard_normal(xt.shape)
        value, grad = cfm_loss_and_grad(net, xt, t, c, u)
        if not np.isfinite(value):
            raise NumericalError(f"flow-matching loss became non-finite at step {step}")
        if cfg.lr_schedule == "cosine":
            opt.lr = _cosine_lr(cfg.lr, step, cfg.steps)
        net.params = opt.step(net.params, grad)
        history.append(float(value))
    if student is not None and params_digest(student) != digest:
        raise RuntimeError("student corrector was modified during flow-matching training")
    return net, history


def sample(v: VelocityNet, x0, c=None, nfe: int = 100, method: str = "euler") -> SampleReport:
    """Integrate ``dx/dt = v(x, t, c)`` from the source datum at t=0 to t=1.

    Euler takes ``nfe`` steps.  Heun takes ``nfe / 2`` steps (two evaluations
    each); its trajectory interleaves the predictor states so that the
    trajectory always holds ``nfe + 1`` states.
    """
    if nfe < 1:
        raise ValueError("nfe must be >= 1")
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown method {method!r}")
    if method == "heun" and nfe % 2:
        raise ValueError("heun needs an even nfe (two evaluations per step)")
    x = np.array(x0, dtype=np.float64, copy=True)
    traj = [x.copy()]
    steps = nfe if method == "euler" else nfe // 2
    h = 1.0 / steps
    for i in range(steps):
        t = i * h
        k1 = velocity_eval(v, x, t, c)
        if method == "euler":
            x = x + h * k1
        else:
            xp = x + h * k1
            _check(xp, i)
            traj.append(xp.copy())
            k2 = velocity_eval(v, xp, t + h, c)
            x = x + 0.5 * h * (k1 + k2)
        _check(x, i)
        traj.append(x.copy())
    return SampleReport(traj, nfe, x)


def _check(x, i):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"sampler state became non-finite at step {i}")


def write_history(path, history) -> None:
    write_csv(path, ["step", "loss"], [[i, h] for i, h in enumerate(history)])


def write_trajectory(path, report: SampleReport) -> None:
    """One row per (state index, sample) with coordinates."""
    arr = report.to_array()
    if arr.ndim == 2:
        arr = arr[:, None, :]
    k, n, d = arr.shape
    rows = ([i, j, *arr[i, j]] for i in range(k) for j in range(n))
    write_csv(path, ["state", "sample"] + [f"x{j}" for j in range(d)], rows)
