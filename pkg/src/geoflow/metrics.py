"""Path-geometry diagnostics and distribution distances."""

from __future__ import annotations

import numpy as np
from scipy.integrate import trapezoid
from scipy.spatial.distance import cdist

from .geodesic import DiscretePath, _normal_parts, el_residual, pointwise_el_residual, resample_constant_speed
from .nets import CorrectorNet, corrector_eval, corrector_jet


def relative_log_prob(points, m) -> np.ndarray:
    """Cumulative trapezoidal integral of ``<gamma', grad log p(gamma)>`` along sampled points.

    ``points`` are ``n + 1`` samples at uniform parameter values on [0, 1];
    velocities come from second-order differences.  The first entry is 0 and
    the last approximates ``log p(end) - log p(start)``.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 points (n >= 2)")
    n = x.shape[0] - 1
    vel = np.empty_like(x)
    vel[1:-1] = (x[2:] - x[:-2]) * (n / 2.0)
    vel[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) * (n / 2.0)
    vel[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) * (n / 2.0)
    f = np.sum(vel * m.score(x), axis=1)
    return np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) / n)])


def interpolant_nodes(net: CorrectorNet | None, x0, x1, n: int = 64) -> np.ndarray:
    """Interpolant ``lerp + phi`` at ``t_i = i / n`` for one pair; shape (n + 1, d)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    t = np.linspace(0.0, 1.0, n + 1)
    lerp = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    if net is None:
        return lerp
    return lerp + corrector_eval(net, np.tile(x0, (n + 1, 1)), np.tile(x1, (n + 1, 1)), t)


def path_residual(nodes, m, reparameterize: bool = True) -> np.ndarray:
    """Interior Euler-Lagrange residuals of a node path.

    With ``reparameterize`` the path is first moved to constant Euclidean
    speed, the parameterisation the residual presupposes; the straight line
    is unaffected.  Zero-length paths give zeros.
    """
    p = DiscretePath(nodes)
    if p.polyline_length() == 0.0:
        return np.zeros(p.n - 1)
    if reparameterize:
        p = resample_constant_speed(p)
    return el_residual(p, m)


def interpolant_residual(net, m, x0, x1, n: int = 64, reparameterize: bool = True) -> np.ndarray:
    """Mean interior residual per pair of the corrector's interpolants."""
    x0 = np.atleast_2d(x0)
    x1 = np.atleast_2d(x1)
    out = np.empty(x0.shape[0])
    for i in range(x0.shape[0]):
        out[i] = float(np.mean(path_residual(interpolant_nodes(net, x0[i], x1[i], n), m, reparameterize)))
    return out


def el_residual_curve(student: CorrectorNet | None, m, pairs, t_grid, reparameterize: bool = True, length_grid: int = 257):
    """Per-t mean over pairs of the residual of the interpolant, evaluated exactly in t.

    ``pairs`` is ``(x0, x1)`` row arrays.  With ``reparameterize`` the residual
    is that of the same curve at constant speed ``L`` (its length):
    ``L^2 |P gamma'' / |gamma'|^2 + P grad log p|``, which equals the plain
    residual on constant-speed curves such as the straight line.  Pairs whose
    interpolant has (numerically) zero speed at some grid time are skipped;
    returns ``(curve, skipped)``.  ``t_grid`` must lie strictly inside (0, 1).
    """
    x0, x1 = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in pairs)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any((t_grid <= 0.0) | (t_grid >= 1.0)):
        raise ValueError("t_grid must be interior to (0, 1)")
    n, T = x0.shape[0], len(t_grid)
    pos, vel, acc = _jets(student, x0, x1, t_grid)
    speed = np.linalg.norm(vel, axis=1).reshape(n, T)
    keep = np.all(speed > 1e-12, axis=1)
    rows = np.repeat(keep, T)
    res = np.zeros(n * T)
    if np.any(rows):
        s = m.score(pos[rows]) if m is not None else np.zeros_like(pos[rows])
        if reparameterize:
            sp, _, ps, pa = _normal_parts(vel[rows], acc[rows], s)
            grid = np.linspace(0.0, 1.0, length_grid)
            _, gv, _ = _jets(student, x0, x1, grid)
            length = trapezoid(np.linalg.norm(gv, axis=1).reshape(n, -1), grid, axis=1)
            res[rows] = np.repeat(length[keep] ** 2, T) * np.linalg.norm(pa / sp**2 + ps, axis=1)
        else:
            res[rows] = pointwise_el_residual(vel[rows], acc[rows], s)
    res = res.reshape(n, T)
    curve = res[keep].mean(axis=0) if np.any(keep) else np.full(T, np.nan)
    return curve, int(np.sum(~keep))


def _jets(student, x0, x1, t_grid):
    """Position, velocity, acceleration of the interpolant; pair-major rows."""
    T = len(t_grid)
    a, b, tt = np.repeat(x0, T, axis=0), np.repeat(x1, T, axis=0), np.tile(t_grid, x0.shape[0])
    pos = (1.0 - tt)[:, None] * a + tt[:, None] * b
    vel = b - a
    acc = np.zeros_like(a)
    if student is not None:
        phi, d1, d2 = corrector_jet(student, a, b, tt)
        pos, vel, acc = pos + phi, vel + d1, d2
    return pos, vel, acc


def path_smoothness(points) -> tuple[float, float]:
    """Euclidean path-length analog ``n * sum |dx|^2`` and mean turning angle (radians)."""
    x = np.asarray(points, dtype=np.float64)
    if x.shape[0] < 3:
        raise ValueError("need at least 3 points")
    d = np.diff(x, axis=0)
    n = d.shape[0]
    ppl = float(n * np.sum(d * d))
    la = np.linalg.norm(d[:-1], axis=1)
    lb = np.linalg.norm(d[1:], axis=1)
    ok = (la > 0) & (lb > 0)
    if not np.any(ok):
        return ppl, 0.0
    cos = np.sum(d[:-1][ok] * d[1:][ok], axis=1) / (la[ok] * lb[ok])
    return ppl, float(np.mean(np.arccos(np.clip(cos, -1.0, 1.0))))


def energy_distance(a, b, max_points: int | None = None, rng: np.random.Generator | None = None) -> float:
    """``2 E|a - b| - E|a - a'| - E|b - b'|`` from all pairs (V-statistic, hence >= 0).

    With ``max_points`` each set is subsampled without replacement first.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("energy distance needs at least 2 samples per set")
    if max_points is not None:
        rng = rng if rng is not None else np.random.default_rng(0)
        if a.shape[0] > max_points:
            a = a[rng.choice(a.shape[0], max_points, replace=False)]
        if b.shape[0] > max_points:
            b = b[rng.choice(b.shape[0], max_points, replace=False)]
    ab = _mean_dist(a, b)
    aa = _mean_dist(a, a)
    bb = _mean_dist(b, b)
    return float(max(2.0 * ab - aa - bb, 0.0))


def _mean_dist(a, b, block: int = 2048) -> float:
    total = 0.0
    for lo in range(0, a.shape[0], block):
        total += cdist(a[lo : lo + block], b).sum()
    return total / (a.shape[0] * b.shape[0])


def endpoint_rmse(predicted, ground_truth) -> float:
    """Root mean over samples of the squared endpoint distance."""
    p = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    g = np.atleast_2d(np.asarray(ground_truth, dtype=np.float64))
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.sqrt(np.mean(np.sum((p - g) ** 2, axis=1))))

