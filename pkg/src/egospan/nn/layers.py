"""Neural network layers with hand-written forward/backward passes.

Everything runs on float64 numpy arrays shaped (batch, channel, ...).
Layers are pure: ``forward(x)`` returns the output, ``backward(x, gy)``
returns ``(gx, param_grads)`` recomputing whatever it needs from x, so
composite networks own all caching explicitly. ``jvp(x, v)`` gives the
directional derivative used by the adjoint tests.
"""

import numpy as np

from ..exceptions import DataError


def _he_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape)


class Layer:
    """Base layer: no parameters, identity behaviour."""

    def params(self):
        return {}

    def forward(self, x):
        raise NotImplementedError

    def backward(self, x, gy):
        raise NotImplementedError

    def jvp(self, x, v):
        raise NotImplementedError


def _check_shape(x, ndim, name):
    if x.ndim != ndim:
        raise DataError(f"{name}: expected {ndim}d input, got shape {x.shape}")


class Linear(Layer):
    """Fully connected layer: y = x @ w.T + b on (batch, in) inputs."""

    def __init__(self, in_dim, out_dim, rng, zero_init=False):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if zero_init:
            self.w = np.zeros((out_dim, in_dim))
        else:
            self.w = _he_uniform(rng, (out_dim, in_dim), in_dim)
        self.b = np.zeros(out_dim)

    def params(self):
        return {"w": self.w, "b": self.b}

    def forward(self, x):
        _check_shape(x, 2, "Linear")
        if x.shape[1] != self.in_dim:
            raise DataError(
                f"Linear: expected {self.in_dim} features, got {x.shape[1]}")
        return x @ self.w.T + self.b

    def backward(self, x, gy):
        gx = gy @ self.w
        return gx, {"w": gy.T @ x, "b": gy.sum(axis=0)}

    def jvp(self, x, v):
        return v @ self.w.T


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


class Conv2d(Layer):
    """2D convolution (cross-correlation), square kernel."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        self.w = _he_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.b = np.zeros(out_ch)

    def params(self):
        return {"w": self.w, "b": self.b}

    def _out_hw(self, H, W):
        k, s, p = self.kernel, self.stride, self.pad
        return (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1

    def _cols(self, x):
        """Windows as (B, C, k, k, Ho, Wo) via strided slicing."""
        B, C, H, W = x.shape
        k, s = self.kernel, self.stride
        xp = _pad2d(x, self.pad)
        Ho, Wo = self._out_hw(H, W)
        cols = np.empty((B, C, k, k, Ho, Wo))
        for di in range(k):
            for dj in range(k):
                cols[:, :, di, dj] = xp[:, :, di:di + s * Ho:s,
                                        dj:dj + s * Wo:s]
        return cols, Ho, Wo

    def forward(self, x):
        _check_shape(x, 4, "Conv2d")
        if x.shape[1] != self.in_ch:
            raise DataError(
                f"Conv2d: expected {self.in_ch} channels, got {x.shape[1]}")
        cols, Ho, Wo = self._cols(x)
        B = x.shape[0]
        flat = cols.reshape(B, -1, Ho * Wo)
        wf = self.w.reshape(self.out_ch, -1)
        y = wf @ flat + self.b[:, None]
        return y.reshape(B, self.out_ch, Ho, Wo)

    def backward(self, x, gy):
        B, C, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        cols, Ho, Wo = self._cols(x)
        flat = cols.reshape(B, -1, Ho * Wo)
        gyf = gy.reshape(B, self.out_ch, Ho * Wo)
        wf = self.w.reshape(self.out_ch, -1)
        gw = np.einsum("bol,bcl->oc", gyf, flat).reshape(self.w.shape)
        gb = gyf.sum(axis=(0, 2))
        gcols = (wf.T @ gyf).reshape(B, C, k, k, Ho, Wo)
        gxp = np.zeros((B, C, H + 2 * p, W + 2 * p))
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s] += \
                    gcols[:, :, di, dj]
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        return gx, {"w": gw, "b": gb}

    def jvp(self, x, v):
        return self.forward(v) - self.b[:, None, None]


class Conv3d(Layer):
    """3D convolution over (B, C, D, H, W), cubic kernel."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, pad=0):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel**3
        self.w = _he_uniform(rng, (out_ch, in_ch, kernel, kernel, kernel),
                             fan_in)
        self.b = np.zeros(out_ch)

    def params(self):
        return {"w": self.w, "b": self.b}

    def _out_dhw(self, D, H, W):
        k, s, p = self.kernel, self.stride, self.pad
        return ((D + 2 * p - k) // s + 1, (H + 2 * p - k) // s + 1,
                (W + 2 * p - k) // s + 1)

    def _cols(self, x):
        B, C, D, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        Do, Ho, Wo = self._out_dhw(D, H, W)
        cols = np.empty((B, C, k, k, k, Do, Ho, Wo))
        for dd in range(k):
            for di in range(k):
                for dj in range(k):
                    cols[:, :, dd, di, dj] = xp[:, :, dd:dd + s * Do:s,
                                                di:di + s * Ho:s,
                                                dj:dj + s * Wo:s]
        return cols, Do, Ho, Wo

    def forward(self, x):
        _check_shape(x, 5, "Conv3d")
        if x.shape[1] != self.in_ch:
            raise DataError(
                f"Conv3d: expected {self.in_ch} channels, got {x.shape[1]}")
        cols, Do, Ho, Wo = self._cols(x)
        B = x.shape[0]
        flat = cols.reshape(B, -1, Do * Ho * Wo)
        wf = self.w.reshape(self.out_ch, -1)
        y = wf @ flat + self.b[:, None]
        return y.reshape(B, self.out_ch, Do, Ho, Wo)

    def backward(self, x, gy):
        B, C, D, H, W = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        cols, Do, Ho, Wo = self._cols(x)
        flat = cols.reshape(B, -1, Do * Ho * Wo)
        gyf = gy.reshape(B, self.out_ch, Do * Ho * Wo)
        wf = self.w.reshape(self.out_ch, -1)
        gw = np.einsum("bol,bcl->oc", gyf, flat).reshape(self.w.shape)
        gb = gyf.sum(axis=(0, 2))
        gcols = (wf.T @ gyf).reshape(B, C, k, k, k, Do, Ho, Wo)
        gxp = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p))
        for dd in range(k):
            for di in range(k):
                for dj in range(k):
                    gxp[:, :, dd:dd + s * Do:s, di:di + s * Ho:s,
                        dj:dj + s * Wo:s] += gcols[:, :, dd, di, dj]
        gx = gxp[:, :, p:p + D, p:p + H, p:p + W] if p else gxp
        return gx, {"w": gw, "b": gb}

    def jvp(self, x, v):
        return self.forward(v) - self.b[:, None, None, None]


class ReLU(Layer):
    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, x, gy):
        return gy * (x > 0), {}

    def jvp(self, x, v):
        return v * (x > 0)


class Sigmoid(Layer):
    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out

    def backward(self, x, gy):
        s = self.forward(x)
        return gy * s * (1.0 - s), {}

    def jvp(self, x, v):
        s = self.forward(x)
        return v * s * (1.0 - s)


class MaxPool2d(Layer):
    """Max pooling with square window; partial windows are dropped."""

    def __init__(self, kernel, stride=None):
        self.kernel = kernel
        self.stride = stride or kernel

    def _windows(self, x):
        B, C, H, W = x.shape
        k, s = self.kernel, self.stride
        Ho = (H - k) // s + 1
        Wo = (W - k) // s + 1
        win = np.empty((B, C, k * k, Ho, Wo))
        for di in range(k):
            for dj in range(k):
                win[:, :, di * k + dj] = x[:, :, di:di + s * Ho:s,
                                           dj:dj + s * Wo:s]
        return win, Ho, Wo

    def forward(self, x):
        _check_shape(x, 4, "MaxPool2d")
        win, _, _ = self._windows(x)
        return win.max(axis=2)

    def backward(self, x, gy):
        B, C, H, W = x.shape
        k, s = self.kernel, self.stride
        win, Ho, Wo = self._windows(x)
        arg = win.argmax(axis=2)
        gx = np.zeros_like(x)
        for di in range(k):
            for dj in range(k):
                sel = arg == di * k + dj
                gx[:, :, di:di + s * Ho:s, dj:dj + s * Wo:s] += gy * sel
        return gx, {}

    def jvp(self, x, v):
        win, _, _ = self._windows(x)
        vwin, _, _ = self._windows(v)
        arg = win.argmax(axis=2)
        return np.take_along_axis(vwin, arg[:, :, None], axis=2)[:, :, 0]


class BilinearUpsample2d(Layer):
    """Bilinear 2x upsampling, half-pixel (align-corners false) sampling.

    Output pixel r samples source coordinate r/2 - 0.25, clamped to the
    image; even rows mix (0.25, 0.75) of the two neighbours, odd rows
    (0.75, 0.25), which edge-replication padding realizes exactly.
    """

    def forward(self, x):
        _check_shape(x, 4, "BilinearUpsample2d")
        return self._up_last(self._up_last(x.swapaxes(2, 3)).swapaxes(2, 3))

    @staticmethod
    def _up_last(x):
        n = x.shape[-1]
        xp = np.concatenate([x[..., :1], x, x[..., -1:]], axis=-1)
        even = 0.25 * xp[..., 0:n] + 0.75 * xp[..., 1:n + 1]
        odd = 0.75 * xp[..., 1:n + 1] + 0.25 * xp[..., 2:n + 2]
        out = np.empty(x.shape[:-1] + (2 * n,))
        out[..., 0::2] = even
        out[..., 1::2] = odd
        return out

    @staticmethod
    def _down_last(gy):
        """Adjoint of _up_last."""
        n = gy.shape[-1] // 2
        even = gy[..., 0::2]
        odd = gy[..., 1::2]
        gxp = np.zeros(gy.shape[:-1] + (n + 2,))
        gxp[..., 0:n] += 0.25 * even
        gxp[..., 1:n + 1] += 0.75 * even
        gxp[..., 1:n + 1] += 0.75 * odd
        gxp[..., 2:n + 2] += 0.25 * odd
        gx = gxp[..., 1:n + 1]
        gx[..., 0] += gxp[..., 0]
        gx[..., -1] += gxp[..., -1]
        return gx

    def backward(self, x, gy):
        g = self._down_last(gy.swapaxes(2, 3)).swapaxes(2, 3)
        return self._down_last(g), {}

    def jvp(self, x, v):
        return self.forward(v)


class Flatten(Layer):
    def forward(self, x):
        return x.reshape(x.shape[0], -1)

    def backward(self, x, gy):
        return gy.reshape(x.shape), {}

    def jvp(self, x, v):
        return v.reshape(v.shape[0], -1)


def concat_forward(xs, axis=1):
    return np.concatenate(xs, axis=axis)


def concat_backward(gy, shapes, axis=1):
    sizes = [s[axis] for s in shapes]
    splits = np.cumsum(sizes)[:-1]
    return np.split(gy, splits, axis=axis)
