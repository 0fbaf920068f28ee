"""Parameters and the two optimizers used by the search (SGD for weights,
Adam for search parameters)."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from nce.errors import UsageError
from nce.tensor import Tensor


class Parameter(Tensor):
    """A leaf tensor that owns its optimizer moment buffers.

    Keeping the buffers on the parameter lets structural growth (channel
    expansion) pad values and moments in one place.
    """

    def __init__(self, values, learnable: bool = True, name: str = ""):
        super().__init__(values, requires_grad=learnable)
        self.learnable = learnable
        self.name = name
        self.state: dict[str, np.ndarray] = {}

    def grow(self, axis: int, extra: np.ndarray):
        """Append ``extra`` along ``axis``; moment buffers are zero-padded."""
        extra = np.asarray(extra, dtype=self.values.dtype)
        self.values = np.concatenate([self.values, extra], axis=axis)
        for key, buf in self.state.items():
            if isinstance(buf, np.ndarray) and buf.ndim == self.values.ndim:
                pad = np.zeros(extra.shape, dtype=buf.dtype)
                self.state[key] = np.concatenate([buf, pad], axis=axis)
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, learnable={self.learnable})"


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.grad = None


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


class SGD:
    def __init__(self, params, lr=0.05, momentum=0.9, weight_decay=5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay

    def step(self, allow_missing: bool = True):
        for p in self.params:
            if not p.learnable:
                continue
            if p.grad is None:
                if allow_missing:
                    continue
                raise UsageError(f"parameter {p.name!r} has no gradient")
            sgd_step(p, self.lr, self.momentum, self.weight_decay)


class Adam:
    def __init__(self, params, lr=0.001, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps

    def step(self, allow_missing: bool = True):
        for p in self.params:
            if not p.learnable:
                continue
            if p.grad is None:
                if allow_missing:
                    continue
                raise UsageError(f"parameter {p.name!r} has no gradient")
            adam_step(p, self.lr, self.betas, self.eps)


def sgd_step(p: Parameter, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    if p.grad is None:
        raise UsageError(f"parameter {p.name!r} has no gradient")
    if not p.learnable:
        return
    g = p.grad
    if weight_decay:
        g = g + weight_decay * p.values
    if momentum:
        buf = p.state.get("momentum")
        buf = g.copy() if buf is None else momentum * buf + g
        p.state["momentum"] = buf
        g = buf
    p.values = (p.values - lr * g).astype(p.values.dtype)


def adam_step(p: Parameter, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    if p.grad is None:
        raise UsageError(f"parameter {p.name!r} has no gradient")
    if not p.learnable:
        return
    b1, b2 = betas
    m = p.state.get("exp_avg")
    v = p.state.get("exp_avg_sq")
    if m is None:
        m = np.zeros_like(p.values)
        v = np.zeros_like(p.values)
    t = int(p.state.get("step", 0)) + 1
    g = p.grad
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p.values = (p.values - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.values.dtype)
    p.state.update(exp_avg=m, exp_avg_sq=v, step=t)
