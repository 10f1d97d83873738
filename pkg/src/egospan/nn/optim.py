"""Optimizers: SGD with momentum and Adam. Updates are in place."""

import numpy as np

from ..exceptions import DataError


def _check_match(params, grads):
    if set(params) != set(grads):
        raise DataError(
            f"param/grad name mismatch: {sorted(set(params) ^ set(grads))}")
    for name in params:
        if params[name].shape != grads[name].shape:
            raise DataError(
                f"{name}: param shape {params[name].shape} vs grad shape "
                f"{grads[name].shape}")


class SGD:
    def __init__(self, lr=0.01, momentum=0.0):
        self.lr = lr
        self.momentum = momentum
        self.velocity = {}

    def step(self, params, grads):
        _check_match(params, grads)
        for name, p in params.items():
            g = grads[name]
            if self.momentum:
                v = self.velocity.get(name)
                if v is None:
                    v = np.zeros_like(p)
                    self.velocity[name] = v
                v *= self.momentum
                v += g
                p -= self.lr * v
            else:
                p -= self.lr * g


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        _check_match(params, grads)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**self.t)
            vhat = v / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
