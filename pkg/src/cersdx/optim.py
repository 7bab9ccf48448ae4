"""Adam and a reduce-on-plateau learning-rate schedule over dicts of arrays."""

from __future__ import annotations

import numpy as np

from . import kernels


class Adam:
    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            if k not in self.params:
                continue
            kernels.adam_update(
                self.params[k], g, self.m[k], self.v[k],
                self.lr, self.b1, self.b2, self.eps, c1, c2, self.weight_decay,
            )


class ReduceLROnPlateau:
    """Multiply the optimiser LR by ``factor`` after ``patience`` epochs
    without improvement of the monitored loss; never below ``min_lr``."""

    def __init__(self, opt: Adam, factor=0.5, patience=5, min_lr=1e-6, threshold=1e-4):
        self.opt = opt
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = np.inf
        self.bad = 0

    def step(self, loss: float) -> None:
        if loss < self.best * (1.0 - self.threshold):
            self.best = loss
            self.bad = 0
            return
        self.bad += 1
        if self.bad >= self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.bad = 0

    @property
    def at_floor(self) -> bool:
        return self.opt.lr <= self.min_lr
