"""Node-based probability-density geodesics.

A path is ``N + 1`` nodes at uniform parameter values ``t_i = i / N`` with
pinned endpoints.  The action is the density-weighted length
``S = int |gamma'| / p(gamma) dt``; the solver descends it with the
functional derivative and keeps nodes at constant Euclidean speed by
arc-length resampling.

Density arguments are anything with ``log_density(x)`` and ``score(x)``
methods (a :class:`~geoflow.density.GaussianMixture`, a
:class:`~geoflow.density.GuidedField`, ...).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .density import NumericalError
from .persistence import write_csv


class DegeneratePathError(ValueError):
    def __init__(self, node: int):
        self.node = node
        super().__init__(f"vanishing speed at interior node {node}")


class GeodesicDivergence(RuntimeError):
    def __init__(self, message: str, history: list[float]):
        self.history = history
        super().__init__(message)


@dataclass
class DiscretePath:
    nodes: np.ndarray  # (N + 1, d)

    def __post_init__(self):
        self.nodes = np.array(self.nodes, dtype=np.float64)
        if self.nodes.ndim != 2 or self.nodes.shape[0] < 5:
            raise ValueError("a path needs at least 5 nodes (N >= 4)")
        if not np.all(np.isfinite(self.nodes)):
            raise ValueError("path nodes must be finite")

    @property
    def n(self) -> int:
        return self.nodes.shape[0] - 1

    @property
    def t(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n + 1)

    @classmethod
    def linear(cls, x0, x1, n: int = 64) -> "DiscretePath":
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        t = np.linspace(0.0, 1.0, n + 1)[:, None]
        nodes = (1.0 - t) * x0 + t * x1
        nodes[0], nodes[-1] = x0, x1
        return cls(nodes)

    def polyline_length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.nodes, axis=0), axis=1)))

    def to_csv(self, path) -> None:
        write_path_csv(path, self)


@dataclass
class GeodesicConfig:
    # rescaled: update with dS/dgamma * p |gamma'| / N^2, a per-node positive
    # rescaling that is stable for step_size < 0.5 regardless of density scale
    step_size: float = 0.4
    iterations: int = 6000
    resample_every: int = 10
    projection: str = "rescaled"  # or "full-funcderiv"
    # relative rise below which an iteration does not count toward divergence;
    # the stencil action and the continuum gradient disagree at this level near convergence
    rise_tol: float = 1e-6
    # stop once the largest node update is below tol * chord length
    tol: float = 1e-14

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.resample_every < 1:
            raise ValueError("resample_every must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.projection not in ("rescaled", "full-funcderiv"):
            raise ValueError(f"unknown projection {self.projection!r}")


@dataclass
class OptimizeResult:
    path: DiscretePath
    history: list[float] = field(default_factory=list)


def path_derivatives(p: DiscretePath) -> tuple[np.ndarray, np.ndarray]:
    """Second-order finite-difference velocity and acceleration at every node."""
    x = p.nodes
    n = p.n
    vel = np.empty_like(x)
    acc = np.empty_like(x)
    vel[1:-1] = (x[2:] - x[:-2]) * (n / 2.0)
    acc[1:-1] = (x[2:] - 2.0 * x[1:-1] + x[:-2]) * n**2
    vel[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) * (n / 2.0)
    vel[-1] = (3.0 * x[-1] - 4.0 * x[-2] + x[-3]) * (n / 2.0)
    acc[0] = (2.0 * x[0] - 5.0 * x[1] + 4.0 * x[2] - x[3]) * n**2
    acc[-1] = (2.0 * x[-1] - 5.0 * x[-2] + 4.0 * x[-3] - x[-4]) * n**2
    return vel, acc


def _trapezoid(f: np.ndarray, n: int) -> float:
    return float((f.sum() - 0.5 * (f[0] + f[-1])) / n)


def action(p: DiscretePath, m) -> float:
    """Trapezoidal quadrature of ``|gamma'| / p(gamma)`` over the nodes."""
    vel, _ = path_derivatives(p)
    speed = np.linalg.norm(vel, axis=1)
    with np.errstate(over="ignore"):
        integrand = speed * np.exp(-m.log_density(p.nodes))
    return _trapezoid(integrand, p.n)


def _normal_parts(vel, acc, s):
    speed = np.linalg.norm(vel, axis=-1, keepdims=True)
    u = vel / speed
    ps = s - np.sum(s * u, axis=-1, keepdims=True) * u
    pa = acc - np.sum(acc * u, axis=-1, keepdims=True) * u
    return speed, u, ps, pa


def _check_speed(speed: np.ndarray, scale: float) -> None:
    bad = np.flatnonzero(speed[1:-1] <= 1e-300 + 1e-14 * scale)
    if bad.size:
        raise DegeneratePathError(int(bad[0]) + 1)


def pointwise_functional_derivative(vel, acc, s, inv_p) -> np.ndarray:
    """Functional derivative from velocity, acceleration, score and ``1/p`` at
    arbitrary points (rows); used for network-parameterised interpolants."""
    speed, _, ps, pa = _normal_parts(vel, acc, s)
    return -(speed * inv_p[..., None]) * (ps + pa / speed**2)


def pointwise_el_residual(vel, acc, s) -> np.ndarray:
    """``|gamma'' + |gamma'|^2 (I - u u^T) grad log p|`` at arbitrary points (rows)."""
    speed, _, ps, _ = _normal_parts(vel, acc, s)
    return np.linalg.norm(acc + speed**2 * ps, axis=-1)


def functional_derivative(p: DiscretePath, m, projection: str = "full-funcderiv") -> np.ndarray:
    """Variational gradient dS/dgamma at interior nodes (endpoints are zero).

    ``-(|gamma'| / p) (I - u u^T) (grad log p + gamma'' / |gamma'|^2)`` with
    ``u`` the unit tangent.  On a constant-speed path the projection of the
    acceleration is the identity.  ``projection="rescaled"`` returns the same
    vector multiplied by ``p |gamma'| / N^2``, i.e. the negated normal part of
    the Euler-Lagrange residual over ``N^2``.
    """
    vel, acc = path_derivatives(p)
    speed_all = np.linalg.norm(vel, axis=1)
    _check_speed(speed_all, max(speed_all.max(), 1.0))
    x = p.nodes[1:-1]
    speed, _, ps, pa = _normal_parts(vel[1:-1], acc[1:-1], m.score(x))
    out = np.zeros_like(p.nodes)
    if projection == "rescaled":
        out[1:-1] = -(speed**2 * ps + pa) / p.n**2
    elif projection == "full-funcderiv":
        inv_p = np.exp(-m.log_density(x))[:, None]
        out[1:-1] = -(speed * inv_p) * (ps + pa / speed**2)
    else:
        raise ValueError(f"unknown projection {projection!r}")
    return out


def el_residual(p: DiscretePath, m) -> np.ndarray:
    """``|gamma'' + |gamma'|^2 (I - u u^T) grad log p|`` at the N - 1 interior nodes."""
    vel, acc = path_derivatives(p)
    speed_all = np.linalg.norm(vel, axis=1)
    _check_speed(speed_all, max(speed_all.max(), 1.0))
    x = p.nodes[1:-1]
    speed, _, ps, _ = _normal_parts(vel[1:-1], acc[1:-1], m.score(x))
    return np.linalg.norm(acc[1:-1] + speed**2 * ps, axis=1)


def resample_constant_speed(p: DiscretePath, tol: float = 1e-13, max_passes: int = 200) -> DiscretePath:
    """Redistribute nodes to equal Euclidean spacing along the path.

    A cubic spline is fitted once through the nodes against cumulative chord
    length; the new nodes are points on that curve whose chords are equal,
    found by fixed-point iteration on the spline parameter until the
    relative chord spread is below ``tol``.
    """
    nodes = p.nodes.copy()
    x0, x1 = nodes[0].copy(), nodes[-1].copy()
    seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
    total = seg.sum()
    if total == 0.0 or seg.max() - seg.min() <= tol * total / p.n:
        return DiscretePath(nodes)
    curve, length = _chord_spline(nodes, seg)
    u = np.linspace(0.0, length, nodes.shape[0])
    for _ in range(max_passes):
        nodes = curve(u)
        nodes[0], nodes[-1] = x0, x1
        seg = np.linalg.norm(np.diff(nodes, axis=0), axis=1)
        if seg.max() - seg.min() <= tol * seg.sum() / p.n:
            break
        c = np.concatenate([[0.0], np.cumsum(seg)])
        u = np.interp(np.linspace(0.0, c[-1], c.size), c, u)
    return DiscretePath(nodes)


def _chord_spline(nodes: np.ndarray, seg: np.ndarray):
    # cubic spline in cumulative chord length keeps second differences smooth
    s = np.concatenate([[0.0], np.cumsum(seg)])
    keep = np.concatenate([[True], seg > 0])
    s, pts = s[keep], nodes[keep]
    if pts.shape[0] < 4:
        return (lambda u: np.stack([np.interp(u, s, pts[:, j]) for j in range(nodes.shape[1])], axis=1)), s[-1]
    return CubicSpline(s, pts, axis=0), s[-1]


def optimize_path(p: DiscretePath, m, cfg: GeodesicConfig | None = None) -> OptimizeResult:
    """Gradient descent of the action on free interior nodes.

    Records the action before every update (and after the last one).  Stops
    early once an update moves no node by more than ``tol`` times the chord
    length.  Raises
    :class:`GeodesicDivergence` if the action rises for 10 consecutive
    iterations and :class:`NumericalError` on non-finite nodes.
    """
    cfg = cfg or GeodesicConfig()
    nodes = p.nodes.copy()
    x0, x1 = p.nodes[0].copy(), p.nodes[-1].copy()
    cur = DiscretePath(nodes)
    if np.array_equal(x0, x1):
        return OptimizeResult(cur, [action(cur, m)])
    history = [action(cur, m)]
    rising = 0
    chord = float(np.linalg.norm(x1 - x0))
    for it in range(cfg.iterations):
        step = cfg.step_size * functional_derivative(cur, m, cfg.projection)
        converged = float(np.max(np.abs(step))) <= cfg.tol * chord
        nodes = cur.nodes - step
        nodes[0], nodes[-1] = x0, x1
        if not np.all(np.isfinite(nodes)):
            raise NumericalError(f"path nodes became non-finite at iteration {it}")
        cur = DiscretePath.__new__(DiscretePath)
        cur.nodes = nodes
        if (it + 1) % cfg.resample_every == 0:
            cur = resample_constant_speed(cur, max_passes=1)
            cur.nodes[0], cur.nodes[-1] = x0, x1
        history.append(action(cur, m))
        if history[-1] > history[-2] * (1.0 + cfg.rise_tol) + 1e-300:
            rising += 1
            if rising >= 10:
                raise GeodesicDivergence(f"action rose for 10 consecutive iterations (at {it})", history)
        else:
            rising = 0
        if converged:
            break
    return OptimizeResult(DiscretePath(cur.nodes), history)


def grid_geodesic_oracle(m, x0, x1, bounds, resolution: int = 256) -> tuple[np.ndarray, float]:
    """Dijkstra shortest path on an 8-connected grid over a 2D box.

    Edge weight is Euclidean length times the mean of ``1/p`` at the two
    ends.  ``x0``/``x1`` are joined to their nearest grid nodes with edges of
    the same form.  Returns the polyline and its weighted length.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    (lo_x, hi_x), (lo_y, hi_y) = bounds
    if x0.shape != (2,) or x1.shape != (2,):
        raise ValueError("grid oracle is two-dimensional")
    for pt in (x0, x1):
        if not (lo_x <= pt[0] <= hi_x and lo_y <= pt[1] <= hi_y):
            raise ValueError(f"endpoint {pt} outside bounds {bounds}")
    r = int(resolution)
    gx = np.linspace(lo_x, hi_x, r)
    gy = np.linspace(lo_y, hi_y, r)
    xx, yy = np.meshgrid(gx, gy, indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    inv_p = np.exp(-m.log_density(pts))
    idx = np.arange(r * r).reshape(r, r)

    rows, cols, wts = [], [], []
    for di, dj in ((1, 0), (0, 1), (1, 1), (1, -1)):
        ia = slice(max(0, -di), r - max(0, di))
        ja = slice(max(0, -dj), r - max(0, dj))
        ib = slice(ia.start + di, ia.stop + di)
        jb = slice(ja.start + dj, ja.stop + dj)
        a, b = idx[ia, ja].ravel(), idx[ib, jb].ravel()
        length = np.linalg.norm(pts[b] - pts[a], axis=1)
        w = length * 0.5 * (inv_p[a] + inv_p[b])
        rows += [a, b]
        cols += [b, a]
        wts += [w, w]
    graph = coo_matrix(
        (np.concatenate(wts), (np.concatenate(rows), np.concatenate(cols))), shape=(r * r, r * r)
    ).tocsr()

    def nearest(pt):
        i = int(np.clip(np.rint((pt[0] - lo_x) / (hi_x - lo_x) * (r - 1)), 0, r - 1))
        j = int(np.clip(np.rint((pt[1] - lo_y) / (hi_y - lo_y) * (r - 1)), 0, r - 1))
        return idx[i, j]

    s, g = nearest(x0), nearest(x1)
    dist, pred = dijkstra(graph, directed=False, indices=s, return_predecessors=True)
    chain = [g]
    while chain[-1] != s:
        prev = pred[chain[-1]]
        if prev < 0:
            raise RuntimeError("grid graph is disconnected")
        chain.append(prev)
    chain.reverse()
    poly = np.vstack([x0, pts[chain], x1])
    ends = np.exp(-m.log_density(np.stack([x0, x1])))
    head = np.linalg.norm(pts[s] - x0) * 0.5 * (ends[0] + inv_p[s])
    tail = np.linalg.norm(x1 - pts[g]) * 0.5 * (ends[1] + inv_p[g])
    return poly, float(dist[g] + head + tail)


def polyline_action(points: np.ndarray, m, per_segment: int = 16) -> float:
    """Action of a polyline by fine trapezoidal quadrature along each segment."""
    points = np.asarray(points, dtype=np.float64)
    u = np.linspace(0.0, 1.0, per_segment + 1)
    total = 0.0
    a, b = points[:-1], points[1:]
    length = np.linalg.norm(b - a, axis=1)
    samples = a[:, None, :] + u[None, :, None] * (b - a)[:, None, :]
    inv_p = np.exp(-m.log_density(samples))
    seg_int = (inv_p.sum(axis=1) - 0.5 * (inv_p[:, 0] + inv_p[:, -1])) / per_segment
    total = float(np.sum(length * seg_int))
    return total


def write_path_csv(path, p: DiscretePath) -> None:
    d = p.nodes.shape[1]
    write_csv(path, ["t"] + [f"x{j}" for j in range(d)], np.column_stack([p.t, p.nodes]))
