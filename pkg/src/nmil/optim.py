"""Plain SGD and Adam over named parameter dictionaries (in-place)."""

from __future__ import annotations

import numpy as np


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params: dict[str, np.ndarray], grads) -> None:
        for name in sorted(params):
            params[name] -= self.lr * _grad(grads, name)


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in sorted(params):
            g = _grad(grads, name)
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _grad(grads, name: str) -> np.ndarray:
    g = grads[name]
    return g.data if hasattr(g, "data") else np.asarray(g)


def make_optimizer(kind: str, lr: float):
    kind = kind.lower()
    if kind == "sgd":
        return SGD(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
