"""Rectified adaptive-moment optimizer with step-milestone learning-rate decay."""

from __future__ import annotations

import math

import numpy as np

from .exceptions import DivergenceError


class RAdam:
    """Adam with variance rectification.

    While the length of the approximated simple moving average (``rho_t``)
    is at most 4 the adaptive learning rate is not trusted and the update is
    a bias-corrected momentum step. ``rectify=False`` gives plain Adam.

    The learning rate is multiplied by ``decay`` each time the step counter
    passes one of ``milestones``.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, rectify=True,
                 milestones=(), decay=0.1):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.rectify = rectify
        self.milestones = sorted(int(m) for m in milestones)
        self.decay = decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.rho_inf = 2.0 / (1.0 - self.beta2) - 1.0

    def current_lr(self, step=None):
        step = self.step_count if step is None else step
        passed = sum(1 for m in self.milestones if step >= m)
        return self.lr * self.decay ** passed

    def step(self, grads=None):
        """Update parameters in place from ``grads`` (defaults to ``p.grad``)."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        for p, g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                bad = int(np.size(g) - np.isfinite(g).sum())
                raise DivergenceError(f"{bad} non-finite gradient entries for {p.name or 'parameter'}")
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        rho_t = self.rho_inf - 2.0 * t * b2 ** t / bc2
        adaptive = not self.rectify or rho_t > 4.0
        if self.rectify and adaptive:
            r = math.sqrt((rho_t - 4) * (rho_t - 2) * self.rho_inf
                          / ((self.rho_inf - 4) * (self.rho_inf - 2) * rho_t))
        else:
            r = 1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / bc1
            if adaptive:
                p.data -= lr * r * m_hat / (np.sqrt(v / bc2) + self.eps)
            else:
                p.data -= lr * m_hat

    def state(self):
        return {"step": self.step_count, "lr": self.current_lr()}
