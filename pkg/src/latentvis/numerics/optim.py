from __future__ import annotations

import numpy as np


def global_grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


class AdamW:
    """Adam with decoupled weight decay.

    Moments live on the parameters themselves (``Param.m`` / ``Param.v``);
    the optimizer only keeps the step counter.  Parameters that are not
    trainable at step time are skipped entirely.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self) -> float:
        """Apply one update and return the pre-clipping gradient norm."""
        live = [p for p in self.params if p.trainable]
        norm = global_grad_norm(live)
        scale = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in live:
            g = p.grad * scale
            p.m *= b1
            p.m += (1.0 - b1) * g
            p.v *= b2
            p.v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (p.m / c1) / (np.sqrt(p.v / c2) + self.eps)
        return norm
