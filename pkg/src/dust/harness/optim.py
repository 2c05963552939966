"""AdamW on a flat parameter vector, global-norm clipping and the lr schedule."""

from __future__ import annotations

import math

import numpy as np


def lr_at(step: int, base_lr: float, total_steps: int, warmup_steps: int) -> float:
    """Linear warmup from 0 to ``base_lr`` over ``warmup_steps``, then cosine to 0.

    ``step`` is the 0-indexed update; ``lr_at(warmup_steps) == base_lr``
    exactly and ``lr_at(total_steps) == 0``.
    """
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    frac = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def clip_grad_norm(g: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt(np.dot(g, g)))
    if max_norm > 0 and norm > max_norm:
        g = g * (max_norm / (norm + 1e-6))
    return g, norm


class AdamW:
    """Decoupled weight decay; decay is multiplied by the step's lr."""

    def __init__(self, size: int, beta1=0.95, beta2=0.999, eps=1e-8, weight_decay=1e-5,
                 decay_mask: np.ndarray | None = None):
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0
        self.decay_mask = np.ones(size, bool) if decay_mask is None else decay_mask
        self._decay = self.decay_mask.astype(np.float64)
        self._buf = np.empty(size)

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> None:
        """In-place update of ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        buf = self._buf
        self.m *= b1
        np.multiply(grad, 1.0 - b1, out=buf)
        self.m += buf
        self.v *= b2
        np.multiply(grad, grad, out=buf)
        buf *= 1.0 - b2
        self.v += buf
        if lr == 0.0:
            return
        if self.wd:
            np.multiply(self._decay, lr * self.wd, out=buf)
            np.subtract(1.0, buf, out=buf)
            params *= buf
        np.divide(self.v, 1.0 - b2 ** self.t, out=buf)
        np.sqrt(buf, out=buf)
        buf += self.eps
        np.divide(self.m, buf, out=buf)
        buf *= lr / (1.0 - b1 ** self.t)
        params -= buf

    def state(self) -> dict:
        return {"t": self.t}
