"""Adam-style moment estimation and plain SGD with global-norm clipping.

``params`` is either a list of arrays or a list of ``{"params": [...], "lr": x}``
groups; groups without an ``lr`` use the optimizer default.
"""

from __future__ import annotations

import numpy as np

from .diffcore import DiffArray


def clip_grad_norm(params, max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= factor
    return total


def _flatten(params, lr):
    params = list(params)
    if params and isinstance(params[0], dict):
        flat, lrs = [], []
        for group in params:
            flat.extend(group["params"])
            lrs.extend([group.get("lr", lr)] * len(group["params"]))
        return flat, lrs
    return params, [lr] * len(params)


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = 5.0):
        self.params: list[DiffArray]
        self.params, self.lrs = _flatten(params, lr)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.clip)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, lr, m, v in zip(self.params, self.lrs, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm


class SGD:
    def __init__(self, params, lr: float = 1e-2, clip: float | None = 5.0):
        self.params, self.lrs = _flatten(params, lr)
        self.lr = lr
        self.clip = clip

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        norm = clip_grad_norm(self.params, self.clip)
        for p, lr in zip(self.params, self.lrs):
            if p.grad is not None:
                p.data -= lr * p.grad
        return norm


def make_optimizer(name: str, params, lr: float, clip: float | None):
    if name == "adam":
        return Adam(params, lr=lr, clip=clip)
    if name == "sgd":
        return SGD(params, lr=lr, clip=clip)
    raise ValueError(f"unknown optimizer {name!r}")
