"""Parameter update rules for the flat parameter vectors."""

from __future__ import annotations

import numpy as np


def clip_by_norm(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


class SGD:
    """Plain gradient descent with global gradient-norm clipping."""

    def __init__(self, lr: float, clip: float | None = 10.0):
        self.lr = lr
        self.clip = clip

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return params - self.lr * clip_by_norm(grad, self.clip)


class Adam:
    """Adam with the same clipping applied to the raw gradient."""

    def __init__(self, lr: float, clip: float | None = 10.0, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.clip, self.b1, self.b2, self.eps = lr, clip, b1, b2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        g = clip_by_norm(grad, self.clip)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mh = self.m / (1 - self.b1**self.t)
        vh = self.v / (1 - self.b2**self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


def make_optimizer(name: str, lr: float, clip: float | None = 10.0):
    if name == "sgd":
        return SGD(lr, clip)
    if name == "adam":
        return Adam(lr, clip)
    raise ValueError(f"unknown optimizer {name!r}")
