"""First-order optimizers over lists of parameter tensors."""

import numpy as np

from .errors import ConfigError


class Optimizer:
    def __init__(self, params, lr, warmup_steps=0):
        self.params = list(params)
        self.base_lr = lr
        self.warmup_steps = int(warmup_steps)
        self.t = 0

    def current_lr(self):
        if self.warmup_steps > 0 and self.t <= self.warmup_steps:
            return self.base_lr * self.t / self.warmup_steps
        return self.base_lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        lr = self.current_lr()
        for i, p in enumerate(self.params):
            if p.grad is not None and p.requires_grad:
                p.data = p.data - self._update(i, p.grad.astype(p.dtype, copy=False), lr)

    def _update(self, i, g, lr):
        raise NotImplementedError

    def state_dict(self):
        return {"t": self.t}

    def load_state_dict(self, state):
        self.t = int(state.get("t", 0))


class SGD(Optimizer):
    def _update(self, i, g, lr):
        return lr * g


class Adam(Optimizer):
    """Adaptive moment estimation with optional linear warmup."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, warmup_steps=0):
        super().__init__(params, lr, warmup_steps)
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self, i, g, lr):
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        mhat = self.m[i] / (1 - self.b1 ** self.t)
        vhat = self.v[i] / (1 - self.b2 ** self.t)
        return lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def load_state_dict(self, state):
        super().load_state_dict(state)
        if "m" in state:
            self.m = [np.array(m) for m in state["m"]]
            self.v = [np.array(v) for v in state["v"]]


def make_optimizer(name, params, lr, warmup_steps=0):
    if name == "adam":
        return Adam(params, lr, warmup_steps=warmup_steps)
    if name == "sgd":
        return SGD(params, lr, warmup_steps)
    raise ConfigError(f"unknown optimizer {name!r}")
