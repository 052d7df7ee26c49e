"""Small fully connected networks.

Parameters live in one flat float64 vector so the reverse-mode tape, the
optimisers and the checkpoint format all see the same object.  Each network
can be evaluated three ways: plain numpy, as a forward-mode jet in time, and
on a reverse-mode tape for parameter gradients.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .rng import make_rng


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...] = (128, 128)
    output_dim: int = 2
    activation: str = "silu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer sizes must be >= 1")
        if self.activation not in dc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.output_dim]

    @property
    def n_params(self) -> int:
        s = self.sizes
        return sum(a * b + b for a, b in zip(s[:-1], s[1:]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            hidden=tuple(d["hidden"]),
            output_dim=int(d["output_dim"]),
            activation=str(d["activation"]),
            seed=int(d["seed"]),
        )


def init_params(spec: MlpSpec) -> np.ndarray:
    """LeCun-normal hidden layers, zero biases, zero output layer."""
    rng = make_rng(spec.seed)
    chunks = []
    sizes = spec.sizes
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = np.zeros((a, b)) if last else rng.standard_normal((a, b)) / np.sqrt(a)
        chunks += [w.ravel(), np.zeros(b)]
    return np.concatenate(chunks)


def _layers(spec: MlpSpec, params):
    """Yield (W, b) views (arrays, or tape Vars) from the flat parameter vector."""
    off = 0
    sizes = spec.sizes
    for a, b in zip(sizes[:-1], sizes[1:]):
        w = params[off : off + a * b].reshape(a, b)
        off += a * b
        bias = params[off : off + b]
        off += b
        yield w, bias


def mlp_forward(spec: MlpSpec, params, x):
    """Works on arrays, ``Dual2`` jets (params constant) or tape ``Var`` params."""
    on_tape = isinstance(params, dc.Var)
    act = dc.V_ACTIVATIONS[spec.activation] if on_tape else dc.ACTIVATIONS[spec.activation]
    h = x
    layers = list(_layers(spec, params))
    for i, (w, b) in enumerate(layers):
        if on_tape:
            h = dc.matmul(params.tape.const(h) if not isinstance(h, dc.Var) else h, w) + b
        else:
            h = h @ w + b
        if i < len(layers) - 1:
            h = act(h)
    return h


@dataclass
class _Net:
    spec: MlpSpec
    params: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.spec)
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.params.shape != (self.spec.n_params,):
            raise DimensionError(f"expected {self.spec.n_params} parameters, got {self.params.shape}")

    def copy(self):
        return type(self)(self.spec, self.params.copy())


class CorrectorNet(_Net):
    """phi(x0, x1, t) = t (1 - t) * MLP([x0, x1, t]); zero at both ends by construction."""

    kind = "corrector"

    @classmethod
    def create(cls, d: int, hidden=(128, 128), activation="silu", seed=0) -> "CorrectorNet":
        return cls(MlpSpec(2 * d + 1, tuple(hidden), d, activation, seed))

    @property
    def dim(self) -> int:
        return self.spec.output_dim


class VelocityNet(_Net):
    """v(x, t, c) = MLP([x, t, c])."""

    kind = "velocity"

    @classmethod
    def create(cls, d: int, cond_dim: int = 0, hidden=(128, 128), activation="silu", seed=0) -> "VelocityNet":
        return cls(MlpSpec(d + 1 + cond_dim, tuple(hidden), d, activation, seed))

    @property
    def dim(self) -> int:
        return self.spec.output_dim

    @property
    def cond_dim(self) -> int:
        return self.spec.input_dim - self.spec.output_dim - 1


def _batch(x0, x1, t):
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    x1 = np.atleast_2d(np.asarray(x1, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    t = np.broadcast_to(t.reshape(-1, 1) if t.ndim else t, (x0.shape[0], 1)).copy()
    return x0, x1, t


def _check_corrector(net: CorrectorNet, x0, x1):
    d = net.dim
    if x0.shape[-1] != d or x1.shape[-1] != d or x0.shape != x1.shape:
        raise DimensionError(f"corrector expects endpoints of dim {d}, got {x0.shape} and {x1.shape}")


def _squeeze_like(out, x0):
    return out[0] if np.ndim(x0) == 1 else out


def corrector_eval(net: CorrectorNet, x0, x1, t) -> np.ndarray:
    """Correction ``t (1 - t) MLP(x0, x1, t)``; batched over rows of ``x0``."""
    a0, a1, tt = _batch(x0, x1, t)
    _check_corrector(net, a0, a1)
    raw = mlp_forward(net.spec, net.params, np.concatenate([a0, a1, tt], axis=1))
    return _squeeze_like(tt * (1.0 - tt) * raw, x0)


def corrector_jet(net: CorrectorNet, x0, x1, t):
    """Value, first and second time derivative of the correction."""
    a0, a1, tt = _batch(x0, x1, t)
    _check_corrector(net, a0, a1)

    def f(tj):
        inp = dc.concat([a0, a1, tj], axis=1)
        return tj * (1.0 - tj) * mlp_forward(net.spec, net.params, inp)

    v, d1, d2 = dc.forward_dual(f, tt)
    return _squeeze_like(v, x0), _squeeze_like(d1, x0), _squeeze_like(d2, x0)


def corrector_time_derivative(net: CorrectorNet, x0, x1, t) -> np.ndarray:
    return corrector_jet(net, x0, x1, t)[1]


def corrector_on_tape(net: CorrectorNet, pvar: dc.Var, x0, x1, t) -> dc.Var:
    """Correction as a tape expression in the parameter ``pvar`` (inputs constant)."""
    a0, a1, tt = _batch(x0, x1, t)
    _check_corrector(net, a0, a1)
    raw = mlp_forward(net.spec, pvar, np.concatenate([a0, a1, tt], axis=1))
    return raw * (tt * (1.0 - tt))


def _velocity_input(net: VelocityNet, x, t, c):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (n, 1))
    if c is None:
        c = np.zeros((n, 0))
    c = np.asarray(c, dtype=np.float64)
    c = np.broadcast_to(c.reshape(1, -1) if c.ndim == 1 else c, (n, c.shape[-1]))
    if x.shape[1] != net.dim or c.shape[1] != net.cond_dim:
        raise DimensionError(
            f"velocity net expects state dim {net.dim} and condition dim {net.cond_dim}, "
            f"got {x.shape[1]} and {c.shape[1]}"
        )
    return np.concatenate([x, t, c], axis=1)


def velocity_eval(net: VelocityNet, x, t, c=None) -> np.ndarray:
    inp = _velocity_input(net, x, t, c)
    out = mlp_forward(net.spec, net.params, inp)
    return out[0] if np.ndim(x) == 1 else out


def velocity_on_tape(net: VelocityNet, pvar: dc.Var, x, t, c=None) -> dc.Var:
    return mlp_forward(net.spec, pvar, _velocity_input(net, x, t, c))


def params_digest(net: _Net) -> str:
    import hashlib

    return hashlib.sha256(net.params.astype("<f8").tobytes()).hexdigest()


def save_checkpoint(net: _Net, path, dtype: str = "<f8") -> None:
    """Write ``net`` in the versioned checkpoint format (see :mod:`geoflow.persistence`)."""
    from .persistence import save_checkpoint as _save

    _save(net, path, dtype)


def load_checkpoint(path) -> _Net:
    from .persistence import load_checkpoint as _load

    return _load(path)
