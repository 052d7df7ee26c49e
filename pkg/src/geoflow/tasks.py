"""Synthetic paired-view datasets and condition embedders."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import ConditionedDensity, GaussianMixture, NoiseSchedule
from .persistence import KIND_PAIRED_DATASET, decode_container, encode_container, write_csv


@dataclass
class PairedDataset:
    """Rows are paired samples.

    ``c0``/``c1`` are density conditions of the two views (soft label
    weights); ``cond`` is the conditioning vector fed to the velocity net;
    ``meta`` carries generator parameters (poses, latent seeds).
    """

    x0: np.ndarray
    x1: np.ndarray
    c0: np.ndarray
    c1: np.ndarray
    cond: np.ndarray
    meta: np.ndarray

    def __post_init__(self):
        n = self.x0.shape[0]
        for name in ("x0", "x1", "c0", "c1", "cond", "meta"):
            a = np.asarray(getattr(self, name), dtype=np.float64)
            if a.ndim == 1:
                a = a.reshape(n, -1)
            if a.shape[0] != n:
                raise ValueError(f"{name} has {a.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} has non-finite entries")
            setattr(self, name, a)
        if self.x0.shape != self.x1.shape:
            raise ValueError("x0 and x1 must have the same shape")

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def dim(self) -> int:
        return self.x0.shape[1]

    def subset(self, idx) -> "PairedDataset":
        return PairedDataset(self.x0[idx], self.x1[idx], self.c0[idx], self.c1[idx], self.cond[idx], self.meta[idx])

    def split(self, n_first: int):
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, len(self)))

    def _blocks(self):
        return [self.x0, self.x1, self.c0, self.c1, self.cond, self.meta]

    def to_bytes(self) -> bytes:
        blocks = self._blocks()
        widths = [b.shape[1] for b in blocks]
        return encode_container(np.concatenate(blocks, axis=1), KIND_PAIRED_DATASET, widths)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "PairedDataset":
        arr, kind, widths = decode_container(blob)
        if kind != KIND_PAIRED_DATASET or len(widths) != 6:
            raise ValueError("container does not hold a paired dataset")
        cuts = np.cumsum([0, *widths])
        parts = [arr[:, cuts[i] : cuts[i + 1]] for i in range(6)]
        return cls(*parts)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "PairedDataset":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())

    def to_csv(self, path) -> None:
        header = []
        for name, b in zip(("x0", "x1", "c0", "c1", "cond", "meta"), self._blocks()):
            header += [f"{name}_{j}" for j in range(b.shape[1])]
        write_csv(path, header, np.concatenate(self._blocks(), axis=1))


# ---------------------------------------------------------------------------
# Plücker rays
# ---------------------------------------------------------------------------


def plucker_embed(o, d) -> np.ndarray:
    """``(o x d_hat, d_hat)``; batched over leading axes."""
    o = np.asarray(o, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("ray direction must be non-zero")
    dh = d / n
    o = np.broadcast_to(o, dh.shape)
    return np.concatenate([np.cross(o, dh), dh], axis=-1)


@dataclass(frozen=True, eq=False)
class CameraPose:
    origin: np.ndarray  # camera centre in world coordinates
    rotation: np.ndarray  # camera-to-world
    focal: float = 1.0
    principal: tuple[float, float] | None = None  # pixels; default image centre

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        o = np.asarray(self.origin, dtype=np.float64)
        if r.shape != (3, 3) or o.shape != (3,):
            raise ValueError("pose needs a 3-vector origin and a 3x3 rotation")
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-10 or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "origin", o)

    @classmethod
    def identity(cls, focal: float = 1.0) -> "CameraPose":
        return cls(np.zeros(3), np.eye(3), focal)


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def orbit_pose(angle: float, radius: float = 2.0, focal: float = 1.0) -> CameraPose:
    """Camera on a circle in the xz-plane, optical axis through the world origin."""
    r = rot_y(angle + np.pi)
    origin = r @ np.array([0.0, 0.0, -radius])
    return CameraPose(origin, r, focal)


def relative_pose(source: CameraPose, target: CameraPose) -> CameraPose:
    """``target`` expressed in the source camera frame (source becomes the identity)."""
    rs = source.rotation
    return CameraPose(rs.T @ (target.origin - source.origin), rs.T @ target.rotation, target.focal, target.principal)


def ray_grid(pose: CameraPose, width: int, height: int) -> np.ndarray:
    """Plücker embedding of the ray through every pixel centre, shape (height, width, 6)."""
    if pose.focal == 0:
        raise ValueError("degenerate intrinsics: zero focal length")
    cx, cy = pose.principal if pose.principal is not None else (width / 2.0, height / 2.0)
    u, v = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    d_cam = np.stack([(u - cx) / pose.focal, (v - cy) / pose.focal, np.ones_like(u)], axis=-1)
    d_world = d_cam @ pose.rotation.T
    return plucker_embed(pose.origin, d_world)


def relative_ray_features(delta: np.ndarray, grid: int = 2, radius: float = 2.0, focal: float = 1.0) -> np.ndarray:
    """Flattened ray grid of the target orbit camera seen from a source at relative angle 0."""
    src = orbit_pose(0.0, radius, focal)
    out = [ray_grid(relative_pose(src, orbit_pose(float(a), radius, focal)), grid, grid).ravel() for a in delta]
    return np.array(out).reshape(len(delta), -1)


# ---------------------------------------------------------------------------
# rotation task
# ---------------------------------------------------------------------------


def rotate_blocks(x: np.ndarray, theta) -> np.ndarray:
    """Rotate each consecutive coordinate pair by ``theta`` (per row); odd trailing coord untouched."""
    x = np.asarray(x, dtype=np.float64)
    theta = np.broadcast_to(np.asarray(theta, dtype=np.float64), x.shape[:-1])[..., None]
    out = x.copy()
    c, s = np.cos(theta), np.sin(theta)
    a, b = x[..., 0:-1:2], x[..., 1::2]
    out[..., 0:-1:2] = c * a - s * b
    out[..., 1::2] = s * a + c * b
    return out


def warp(u, strength: float = 0.5) -> np.ndarray:
    """Elementwise monotone bijection ``u + k tanh(u)``."""
    return u + strength * np.tanh(u)


def warp_derivative(u, strength: float = 0.5) -> np.ndarray:
    return 1.0 + strength * (1.0 - np.tanh(u) ** 2)


def warp_inverse(y, strength: float = 0.5) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    u = y / (1.0 + strength) if strength > 0 else y.copy()
    for _ in range(60):
        step = (warp(u, strength) - y) / warp_derivative(u, strength)
        u = u - step
        if np.max(np.abs(step), initial=0.0) < 1e-15 * max(1.0, float(np.max(np.abs(y), initial=0.0))):
            break
    return u


def view_map(z, theta, strength: float = 0.5) -> np.ndarray:
    return warp(rotate_blocks(z, theta), strength)


def view_map_inverse(x, theta, strength: float = 0.5) -> np.ndarray:
    return rotate_blocks(warp_inverse(x, strength), -np.asarray(theta))


def rotation_transport(x0, delta, strength: float = 0.5) -> np.ndarray:
    """Ground-truth map from a source view to the view rotated by ``delta``."""
    return warp(rotate_blocks(warp_inverse(x0, strength), delta), strength)


@dataclass(frozen=True)
class RotationTaskSpec:
    d: int = 2
    radius: float = 2.0
    ring_std: float = 0.35
    ring_components: int = 8
    other_std: float = 0.5
    warp_strength: float = 0.5
    angle_range: tuple[float, float] = (-0.8 * np.pi, 0.8 * np.pi)
    ray_grid: int = 0  # 0 disables ray features


def rotation_base(spec: RotationTaskSpec) -> GaussianMixture:
    """Object latents: a ring in the first coordinate pair, isotropic elsewhere."""
    m = GaussianMixture.ring(spec.ring_components, spec.radius, spec.ring_std, spec.d)
    var = np.full_like(m.means, spec.other_std**2)
    var[:, :2] = spec.ring_std**2
    return GaussianMixture(m.weights, m.means, var)


def make_rotation_task(n_pairs: int, rng: np.random.Generator, spec: RotationTaskSpec | None = None) -> PairedDataset:
    spec = spec or RotationTaskSpec()
    if spec.d < 2:
        raise ValueError("rotation task needs d >= 2")
    z = rotation_base(spec).sample(n_pairs, rng)
    theta0 = rng.uniform(0.0, 2.0 * np.pi, n_pairs)
    delta = rng.uniform(spec.angle_range[0], spec.angle_range[1], n_pairs)
    x0 = view_map(z, theta0, spec.warp_strength)
    x1 = view_map(z, theta0 + delta, spec.warp_strength)
    cond = [np.cos(delta), np.sin(delta)]
    cond = np.stack(cond, axis=1)
    if spec.ray_grid:
        cond = np.concatenate([cond, relative_ray_features(delta, spec.ray_grid)], axis=1)
    ones = np.ones((n_pairs, 1))
    return PairedDataset(x0, x1, ones, ones, cond, np.stack([theta0, delta], axis=1))


def rotation_task_density(
    spec: RotationTaskSpec | None = None, n_angles: int = 32, schedule: NoiseSchedule | None = None
) -> ConditionedDensity:
    """Analytic stand-in for the law of views: the rotation-averaged ring pushed
    through the warp by linearisation at each component mean."""
    spec = spec or RotationTaskSpec()
    ang = 2.0 * np.pi * np.arange(n_angles) / n_angles
    mu = np.zeros((n_angles, spec.d))
    mu[:, 0] = spec.radius * np.cos(ang)
    mu[:, 1] = spec.radius * np.sin(ang)
    std = np.full_like(mu, spec.other_std)
    std[:, :2] = spec.ring_std
    wmu = warp(mu, spec.warp_strength)
    var = (warp_derivative(mu, spec.warp_strength) * std) ** 2
    m = GaussianMixture(np.full(n_angles, 1.0 / n_angles), wmu, var)
    return ConditionedDensity(m, None, schedule or NoiseSchedule())


# ---------------------------------------------------------------------------
# density-gap bridge and offset tasks
# ---------------------------------------------------------------------------


def bridge_density(
    separation: float = 5.0, std: float = 0.9, schedule: NoiseSchedule | None = None
) -> ConditionedDensity:
    """Two labelled modes on the x-axis; guidance reduces to the conditional score."""
    m = GaussianMixture.isotropic([[-separation / 2, 0.0], [separation / 2, 0.0]], std, labels=[0, 1])
    return ConditionedDensity(m, None, schedule or NoiseSchedule())


def make_gmm_bridge_task(n_pairs: int, cd: ConditionedDensity, rng: np.random.Generator) -> PairedDataset:
    """x0 from mode 0, x1 from mode 1, coupled through a shared standard-normal draw."""
    m = cd.conditional
    if m is None or m.n_components < 2:
        raise ValueError("bridge task needs a mixture with at least two modes")
    labels = m.labels if m.labels is not None else np.arange(m.n_components)
    if len(np.unique(labels)) < 2:
        raise ValueError("bridge task needs at least two labelled modes")
    eps = rng.standard_normal((n_pairs, m.dim))
    u = rng.uniform(size=n_pairs)

    def draw(label):
        comp = np.flatnonzero(labels == label)
        w = m.weights[comp] / m.weights[comp].sum()
        k = comp[np.minimum(np.searchsorted(np.cumsum(w), u, side="right"), len(comp) - 1)]
        return m.means[k] + np.sqrt(m.variances[k]) * eps

    n_lab = int(labels.max()) + 1
    c0 = np.zeros((n_pairs, n_lab))
    c1 = np.zeros((n_pairs, n_lab))
    c0[:, 0] = 1.0
    c1[:, 1] = 1.0
    return PairedDataset(draw(0), draw(1), c0, c1, c1.copy(), eps)


def make_offset_task(n_pairs: int, offset, rng: np.random.Generator, scale: float = 1.0) -> PairedDataset:
    """x1 = x0 + b with a shared offset; the optimal velocity field is the constant b."""
    b = np.asarray(offset, dtype=np.float64)
    x0 = scale * rng.standard_normal((n_pairs, b.shape[0]))
    ones = np.ones((n_pairs, 1))
    return PairedDataset(x0, x0 + b, ones, ones, np.zeros((n_pairs, 0)), np.zeros((n_pairs, 0)))
