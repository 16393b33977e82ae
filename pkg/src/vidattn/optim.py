"""The two optimizers used by training and mask optimization.

Both update parameter arrays in place and keep per-parameter state buffers
matched to the parameter list given at the first step. Weight decay in SGD is
folded into the gradient before the momentum update.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

__all__ = ["SgdMomentum", "Adam"]


def _check(params, grads, buffers):
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} != grad shape {g.shape}")
    if buffers is not None and len(buffers) != len(params):
        raise ShapeError("parameter list changed between optimizer steps")


class SgdMomentum:
    """SGD with momentum and L2 weight decay: v = mu*v + (g + wd*p); p -= lr*v."""

    def __init__(self, lr=0.0001, momentum=0.9, weight_decay=0.0001):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.step_count = 0
        self._velocity = None

    def step(self, params, grads):
        _check(params, grads, self._velocity)
        if self._velocity is None:
            self._velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self._velocity):
            if v.shape != p.shape:
                raise ShapeError(f"state shape {v.shape} != param shape {p.shape}")
            v *= self.momentum
            v += g + self.weight_decay * p
            p -= self.lr * v
        self.step_count += 1


class Adam:
    """Adam with bias-corrected first and second moments."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = None
        self._v = None

    def step(self, params, grads):
        _check(params, grads, self._m)
        if self._m is None:
            self._m = [np.zeros_like(p) for p in params]
            self._v = [np.zeros_like(p) for p in params]
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, g, m, v in zip(params, grads, self._m, self._v):
            if m.shape != p.shape:
                raise ShapeError(f"state shape {m.shape} != param shape {p.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
