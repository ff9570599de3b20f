"""AdamW with decoupled weight decay."""

from __future__ import annotations

import logging

import numpy as np

log = logging.getLogger(__name__)


class AdamW:
    """Standard AdamW over a dict of named parameter tensors.

    A step whose gradients contain any non-finite value is skipped entirely
    and logged; moments stay untouched so training can continue.
    """

    def __init__(self, params: dict, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.skipped = 0

    def step(self, grads: dict) -> bool:
        """Apply one update from name->gradient arrays. Returns False if skipped."""
        for k in self.params:
            g = grads.get(k)
            if g is not None and not np.all(np.isfinite(g)):
                self.skipped += 1
                log.warning("non-finite gradient in %r; step %d skipped", k, self.t + 1)
                return False
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m = self.m[k]
            v = self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
        return True

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        self.m = state["m"]
        self.v = state["v"]
