"""Composite network plumbing: named layers, parameter dicts, Sequential."""

import numpy as np

from ..exceptions import DataError


def scoped(name, grads):
    return {f"{name}.{key}": val for key, val in grads.items()}


class Network:
    """A graph of named layers with hand-written forward/backward.

    Subclasses register layers with ``add`` and implement ``forward``
    (caching whatever intermediates backward needs on self) and
    ``backward`` (returning a gradient dict keyed like ``params()``).
    """

    def __init__(self):
        self._layers = {}

    def add(self, name, layer):
        if name in self._layers:
            raise DataError(f"duplicate layer name {name!r}")
        self._layers[name] = layer
        return layer

    def layer(self, name):
        return self._layers[name]

    def params(self):
        out = {}
        for name, layer in self._layers.items():
            for pname, arr in layer.params().items():
                out[f"{name}.{pname}"] = arr
        return out

    def param_count(self):
        return sum(arr.size for arr in self.params().values())

    def load_params(self, values):
        params = self.params()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise DataError(
                f"parameter name mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, arr in params.items():
            src = np.asarray(values[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise DataError(
                    f"parameter {name}: expected shape {arr.shape}, "
                    f"got {src.shape}")
            arr[...] = src

    def zero_grads(self):
        return {name: np.zeros_like(arr) for name, arr in self.params().items()}

    def forward(self, *inputs):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError


class Sequential(Network):
    """Plain layer chain."""

    def __init__(self, layers):
        super().__init__()
        self._order = []
        for name, layer in layers:
            self.add(name, layer)
            self._order.append(name)
        self._cache = None

    def forward(self, x):
        cache = []
        for name in self._order:
            cache.append(x)
            x = self._layers[name].forward(x)
        self._cache = cache
        return x

    def backward(self, gy):
        """Returns (input gradient, parameter gradient dict)."""
        if self._cache is None:
            raise DataError("backward called before forward")
        grads = {}
        for name, x in zip(reversed(self._order), reversed(self._cache)):
            gy, layer_grads = self._layers[name].backward(x, gy)
            grads.update(scoped(name, layer_grads))
        return gy, grads

    def jvp(self, x, v):
        for name in self._order:
            layer = self._layers[name]
            v = layer.jvp(x, v)
            x = layer.forward(x)
        return v
