from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam, no weight decay.

    State is kept per parameter name so it can be checkpointed alongside the
    weights and restored bit-exactly.
    """

    def __init__(self, named_params, lr=3e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        for n, p in self.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {n}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for n, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[n], self.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            mhat = m / c1
            vhat = v / c2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype, copy=False)

    def state_dict(self):
        state = {"t": self.t}
        for n in self.params:
            state[f"m.{n}"] = self.m[n].copy()
            state[f"v.{n}"] = self.v[n].copy()
        return state

    def load_state_dict(self, state):
        self.t = int(state["t"])
        for n in self.params:
            self.m[n][...] = state[f"m.{n}"]
            self.v[n][...] = state[f"v.{n}"]
