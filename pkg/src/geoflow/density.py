"""Analytic density fields.

Gaussian mixtures with diagonal covariances stand in for the data density of
a pretrained diffusion model: their log-density and score are exact, and the
variance-preserving smoothing ``sqrt(abar) X + sqrt(1 - abar) eps`` of a
mixture is again a mixture.  The probability-flow ODE of that smoothing
process gives deterministic forward (data -> smoothed) and backward maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class NumericalError(FloatingPointError):
    """Non-finite state during integration or optimisation."""


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d), diagonal covariances
    labels: np.ndarray | None = None  # (K,) condition label per component

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim == 1 and var.shape[0] == mu.shape[0] and mu.shape[1] != 1:
            var = var[:, None] * np.ones_like(mu)
        var = np.broadcast_to(var, mu.shape).astype(np.float64)
        if w.shape[0] != mu.shape[0]:
            raise ValueError(f"{w.shape[0]} weights for {mu.shape[0]} components")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must lie on the simplex")
        if not np.all(var > 0):
            raise ValueError("covariance entries must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != w.shape or np.any(lab < 0):
                raise ValueError("labels must be one non-negative int per component")
            object.__setattr__(self, "labels", lab)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def n_labels(self) -> int:
        return 0 if self.labels is None else int(self.labels.max()) + 1

    @classmethod
    def isotropic(cls, means, std, weights=None, labels=None) -> "GaussianMixture":
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k = means.shape[0]
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        return cls(w, means, np.full_like(means, float(std) ** 2), labels)

    @classmethod
    def standard_normal(cls, d: int) -> "GaussianMixture":
        return cls(np.ones(1), np.zeros((1, d)), np.ones((1, d)))

    @classmethod
    def ring(cls, n: int, radius: float, std: float, d: int = 2, center=None) -> "GaussianMixture":
        """``n`` equal components evenly spaced on a circle in the first two coordinates."""
        ang = 2.0 * np.pi * np.arange(n) / n
        means = np.zeros((n, d))
        means[:, 0] = radius * np.cos(ang)
        means[:, 1] = radius * np.sin(ang)
        if center is not None:
            means += np.asarray(center, dtype=np.float64)
        return cls.isotropic(means, std)

    def reweighted(self, cond) -> "_Reweighted":
        """Per-point mixture weights for soft condition vector(s) ``cond``."""
        if self.labels is None or cond is None:
            return _Reweighted(self, np.log(self.weights))
        c = np.asarray(cond, dtype=np.float64)
        if c.shape[-1] < self.n_labels:
            raise ValueError(f"condition has {c.shape[-1]} entries, mixture has {self.n_labels} labels")
        w = self.weights * c[..., self.labels]
        total = w.sum(axis=-1, keepdims=True)
        if np.any(total <= 0):
            raise ValueError("condition assigns zero mass to every component")
        with np.errstate(divide="ignore"):
            return _Reweighted(self, np.log(w / total))

    def log_density(self, x) -> np.ndarray:
        return log_density(self, x)

    def score(self, x) -> np.ndarray:
        return score(self, x)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[k] + np.sqrt(self.variances[k]) * eps


@dataclass(frozen=True, eq=False)
class _Reweighted:
    mixture: GaussianMixture
    log_weights: np.ndarray  # (K,) or (..., K)


def _log_components(m: GaussianMixture, x: np.ndarray) -> np.ndarray:
    diff = x[..., None, :] - m.means
    return -0.5 * np.sum(diff**2 / m.variances + np.log(m.variances) + LOG_2PI, axis=-1)


def _logsumexp(a: np.ndarray, axis=-1) -> np.ndarray:
    amax = np.max(a, axis=axis, keepdims=True)
    amax = np.where(np.isfinite(amax), amax, 0.0)
    return np.squeeze(amax, axis) + np.log(np.sum(np.exp(a - amax), axis=axis))


def _as_weighted(m) -> _Reweighted:
    return m if isinstance(m, _Reweighted) else _Reweighted(m, np.log(m.weights))


def log_density(m, x) -> np.ndarray:
    """log p(x) for a mixture, batched over leading axes of ``x``."""
    rw = _as_weighted(m)
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != rw.mixture.dim:
        raise ValueError(f"point has dim {x.shape[-1]}, mixture has dim {rw.mixture.dim}")
    return _logsumexp(rw.log_weights + _log_components(rw.mixture, x))


def score(m, x) -> np.ndarray:
    """Exact gradient of :func:`log_density`: responsibility-weighted component scores."""
    rw = _as_weighted(m)
    mix = rw.mixture
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != mix.dim:
        raise ValueError(f"point has dim {x.shape[-1]}, mixture has dim {mix.dim}")
    logr = rw.log_weights + _log_components(mix, x)
    logr = logr - _logsumexp(logr)[..., None]
    r = np.exp(logr)
    comp = (mix.means - x[..., None, :]) / mix.variances
    return np.sum(r[..., None] * comp, axis=-2)


def smooth(m: GaussianMixture, abar: float) -> GaussianMixture:
    """Exact law of ``sqrt(abar) X + sqrt(1 - abar) eps`` for ``X ~ m``."""
    abar = float(abar)
    if not 0.0 < abar <= 1.0:
        raise ValueError(f"abar must lie in (0, 1], got {abar}")
    if abar == 1.0:
        return m
    return GaussianMixture(
        m.weights,
        math.sqrt(abar) * m.means,
        abar * m.variances + (1.0 - abar),
        m.labels,
    )


# ---------------------------------------------------------------------------
# noise schedules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance-preserving schedule, ``abar(t) = exp(-int_0^t beta)``."""

    kind: str = "linear-VP"
    beta_min: float = 0.1
    beta_max: float = 20.0
    cosine_offset: float = 0.008

    def __post_init__(self):
        if self.kind not in ("linear-VP", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")

    def _cos_arg(self, t):
        s = self.cosine_offset
        return (np.asarray(t, dtype=np.float64) + s) / (1.0 + s) * (np.pi / 2.0)

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear-VP":
            return np.exp(-(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t**2))
        ab = (np.cos(self._cos_arg(t)) / np.cos(self._cos_arg(0.0))) ** 2
        return np.maximum(ab, 1e-12)

    def beta(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "linear-VP":
            return self.beta_min + (self.beta_max - self.beta_min) * t
        return np.pi / (1.0 + self.cosine_offset) * np.tan(np.minimum(self._cos_arg(t), np.pi / 2 - 1e-6))

    def weighting(self, t):
        """The reporting weight ``-(1 - abar)^(-1/2)`` that converts noise predictions to scores."""
        return -1.0 / np.sqrt(1.0 - self.alpha_bar(t))


DEFAULT_SCHEDULE = NoiseSchedule()


# ---------------------------------------------------------------------------
# conditioned densities, guidance and the probability-flow maps
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConditionedDensity:
    """Conditional mixture p(x|c) plus an unconditional (negative) branch.

    ``conditional=None`` is a flat density (zero score everywhere).
    ``unconditional=None`` is the uniform stub used when guidance should reduce
    to the plain conditional score.
    """

    conditional: GaussianMixture | None
    unconditional: GaussianMixture | None = None
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)

    @classmethod
    def from_labeled(cls, m: GaussianMixture, schedule: NoiseSchedule | None = None) -> "ConditionedDensity":
        """Conditional branch reweights labeled components; unconditional is the marginal."""
        return cls(m, m, schedule or NoiseSchedule())

    @classmethod
    def flat(cls, schedule: NoiseSchedule | None = None) -> "ConditionedDensity":
        return cls(None, None, schedule or NoiseSchedule())

    @property
    def dim(self) -> int | None:
        return None if self.conditional is None else self.conditional.dim

    def conditional_score(self, x, c, abar: float) -> np.ndarray:
        if self.conditional is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return score(smooth(self.conditional, abar).reweighted(c), x)

    def conditional_log_density(self, x, c, abar: float) -> np.ndarray:
        if self.conditional is None:
            return np.zeros(np.shape(x)[:-1])
        return log_density(smooth(self.conditional, abar).reweighted(c), x)


def guided_score(cd: ConditionedDensity, x, beta: float, abar: float, c=None) -> np.ndarray:
    """``beta * (score_cond - score_uncond)`` of the smoothed branches at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if beta == 0.0:
        return np.zeros_like(x)
    s = cd.conditional_score(x, c, abar)
    if cd.unconditional is not None:
        s = s - score(smooth(cd.unconditional, abar), x)
    return beta * s


def guided_log_density(cd: ConditionedDensity, x, beta: float, abar: float, c=None) -> np.ndarray:
    """Unnormalised log of the density whose score is :func:`guided_score`."""
    x = np.asarray(x, dtype=np.float64)
    lp = cd.conditional_log_density(x, c, abar)
    if cd.unconditional is not None:
        lp = lp - log_density(smooth(cd.unconditional, abar), x)
    return beta * lp


@dataclass(frozen=True, eq=False)
class GuidedField:
    """Guided smoothed density seen as a static field, with per-point conditions.

    ``cond`` (if given) is aligned with the leading axes of the points the
    field is evaluated on.
    """

    cd: ConditionedDensity
    beta: float = 1.0
    abar: float = 1.0
    cond: np.ndarray | None = None

    def log_density(self, x) -> np.ndarray:
        return guided_log_density(self.cd, x, self.beta, self.abar, self.cond)

    def score(self, x) -> np.ndarray:
        return guided_score(self.cd, x, self.beta, self.abar, self.cond)


def _pf_drift(cd: ConditionedDensity, x, c, t: float) -> np.ndarray:
    sch = cd.schedule
    s = cd.conditional_score(x, c, float(sch.alpha_bar(t)))
    return -0.5 * float(sch.beta(t)) * (x + s)


def _heun(cd, x, c, t0: float, t1: float, steps: int) -> np.ndarray:
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x, dtype=np.float64, copy=True)
    if cd.conditional is None:
        # zero score: the flow is linear with the closed form sqrt(abar(t1) / abar(t0)) x
        sch = cd.schedule
        return x * float(np.sqrt(sch.alpha_bar(t1) / sch.alpha_bar(t0)))
    ts = np.linspace(t0, t1, steps + 1)
    for i in range(steps):
        h = ts[i + 1] - ts[i]
        k1 = _pf_drift(cd, x, c, ts[i])
        x_pred = x + h * k1
        k2 = _pf_drift(cd, x_pred, c, ts[i + 1])
        x = x + 0.5 * h * (k1 + k2)
        if not np.all(np.isfinite(x)):
            raise NumericalError(f"probability-flow ODE state became non-finite at step {i}")
    return x


def pf_ode_forward(cd: ConditionedDensity, x, c=None, tau: float = 0.6, steps: int = 30) -> np.ndarray:
    """Deterministic map from data space to the smoothed space at time ``tau``."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return _heun(cd, x, c, 0.0, tau, steps)


def pf_ode_backward(cd: ConditionedDensity, z, c=None, tau: float = 0.6, steps: int = 30) -> np.ndarray:
    """Inverse of :func:`pf_ode_forward`: integrate the same ODE from ``tau`` back to 0."""
    if not 0.0 <= tau < 1.0:
        raise ValueError(f"tau must lie in [0, 1), got {tau}")
    if tau == 0.0:
        return np.array(z, dtype=np.float64, copy=True)
    return _heun(cd, z, c, tau, 0.0, steps)


def mixture_from_config(components: list[dict]) -> GaussianMixture:
    """Build a mixture from ``[{weight, mean, cov[, label]}, ...]`` entries."""
    w = np.array([float(c["weight"]) for c in components])
    w = w / w.sum()
    mu = np.array([c["mean"] for c in components], dtype=np.float64)
    cov = np.array([np.broadcast_to(c["cov"], (mu.shape[1],)) for c in components], dtype=np.float64)
    labels = None
    if any("label" in c for c in components):
        labels = np.array([int(c.get("label", 0)) for c in components])
    return GaussianMixture(w, mu, cov, labels)
