"""Optimizers: AdamW for model weights, plain SGD with momentum for the
token samplers.

The samplers deliberately avoid Adam: its per-parameter normalization lets
a tiny but consistent gradient (cross-entropy always gains a little margin
from masking uninformative tokens) move the keep logits as fast as a real
compression signal would. SGD respects magnitudes, so the entropy anchor
holds the keep-biased initialization until the norm pressure actually
switches on.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class AdamW:
    """Standard AdamW over a dict of named tensors.

    Decay is decoupled (applied to the weights directly, not the gradient)
    and skipped for biases, gains and gates — any name listed in
    ``no_decay_suffixes``.
    """

    NO_DECAY_SUFFIXES = ("_b", "_g", ".b1", ".b2", ".bq", ".bk", ".bv", ".bo")

    def __init__(self, params: dict, lr: float = 5e-5, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            if self.weight_decay and not name.endswith(self.NO_DECAY_SUFFIXES):
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * update


class SGD:
    """Momentum SGD over a dict of named tensors."""

    def __init__(self, params: dict, lr: float, momentum: float = 0.9):
        self.params = dict(params)
        self.lr = lr
        self.momentum = momentum
        self._v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self._v[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v
