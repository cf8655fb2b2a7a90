"""Layers with explicit forward/backward passes.

Every layer follows the same protocol:

* ``build(in_shape, rng)`` returns ``(params, out_shape)`` where ``params``
  maps local parameter names to freshly initialised arrays,
* ``forward(params, x, training, rng)`` returns ``(y, cache)``,
* ``backward(params, cache, gy, per_example)`` returns ``(gx, grads)``.

Shapes exclude the batch axis; activations are NCHW. With
``per_example=True`` each gradient carries a leading batch axis holding the
contribution of every example to the summed gradient.
"""

from __future__ import annotations

import math

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
LEAKY_ALPHA = 0.01


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output size and (before, after) padding for TF-style 'same' padding."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def im2col(x: np.ndarray, kernel: int, stride: int) -> tuple[np.ndarray, tuple]:
    """Unfold ``x`` (N, C, H, W) into columns (N, C*k*k, OH*OW)."""
    n, c, h, w = x.shape
    oh, ph0, ph1 = same_padding(h, kernel, stride)
    ow, pw0, pw1 = same_padding(w, kernel, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (ph0, ph1), (pw0, pw1)))
    cols = np.empty((n, c, kernel, kernel, oh, ow))
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    geom = (x.shape, xp.shape, ph0, pw0, oh, ow)
    return cols.reshape(n, c * kernel * kernel, oh * ow), geom


def col2im(cols: np.ndarray, geom: tuple, kernel: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to an image."""
    (n, c, h, w), padded_shape, ph0, pw0, oh, ow = geom
    cols = cols.reshape(n, c, kernel, kernel, oh, ow)
    xp = np.zeros(padded_shape)
    for i in range(kernel):
        for j in range(kernel):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[:, :, i, j]
    return xp[:, :, ph0:ph0 + h, pw0:pw0 + w]


class Layer:
    kind = "layer"
    trainable: tuple[str, ...] = ()
    supports_per_example = True

    def build(self, in_shape: tuple, rng: np.random.Generator):
        return {}, in_shape

    def forward(self, params, x, training=False, rng=None):
        raise NotImplementedError

    def backward(self, params, cache, gy, per_example=False):
        raise NotImplementedError

    def state_update(self, cache) -> dict:
        """Non-trainable parameter updates produced by a training forward pass."""
        return {}


class Dense(Layer):
    kind = "dense"
    trainable = ("W", "b")

    def __init__(self, units: int):
        self.units = units

    def build(self, in_shape, rng):
        if len(in_shape) != 1:
            raise ValueError(f"dense expects flat input, got {in_shape}")
        fan_in = in_shape[0]
        return {
            "W": glorot_uniform(rng, (fan_in, self.units), fan_in, self.units),
            "b": np.zeros(self.units),
        }, (self.units,)

    def forward(self, params, x, training=False, rng=None):
        return x @ params["W"] + params["b"], x

    def backward(self, params, cache, gy, per_example=False):
        x = cache
        if per_example:
            grads = {"W": x[:, :, None] * gy[:, None, :], "b": gy.copy()}
        else:
            grads = {"W": x.T @ gy, "b": gy.sum(axis=0)}
        return gy @ params["W"].T, grads


class Conv2D(Layer):
    """2-D convolution with 'same' padding."""

    kind = "conv"
    trainable = ("W", "b")

    def __init__(self, filters: int, kernel: int = 3, stride: int = 1):
        self.filters, self.kernel, self.stride = filters, kernel, stride

    def build(self, in_shape, rng):
        c, h, w = in_shape
        k = self.kernel
        W = glorot_uniform(rng, (self.filters, c, k, k), c * k * k, self.filters * k * k)
        oh, _, _ = same_padding(h, k, self.stride)
        ow, _, _ = same_padding(w, k, self.stride)
        return {"W": W, "b": np.zeros(self.filters)}, (self.filters, oh, ow)

    def forward(self, params, x, training=False, rng=None):
        cols, geom = im2col(x, self.kernel, self.stride)
        W2 = params["W"].reshape(self.filters, -1)
        out = W2 @ cols + params["b"][None, :, None]
        oh, ow = geom[4], geom[5]
        return out.reshape(x.shape[0], self.filters, oh, ow), (cols, geom)

    def backward(self, params, cache, gy, per_example=False):
        cols, geom = cache
        n = gy.shape[0]
        g2 = gy.reshape(n, self.filters, -1)
        W2 = params["W"].reshape(self.filters, -1)
        per = g2 @ cols.transpose(0, 2, 1)
        if per_example:
            grads = {"W": per.reshape((n,) + params["W"].shape), "b": g2.sum(axis=2)}
        else:
            grads = {"W": per.sum(axis=0).reshape(params["W"].shape), "b": g2.sum(axis=(0, 2))}
        gx = col2im(W2.T @ g2, geom, self.kernel, self.stride)
        return gx, grads


class ConvTranspose2D(Layer):
    """Transposed convolution; output spatial size is input size times stride.

    Implemented as the adjoint of a 'same'-padded :class:`Conv2D` mapping
    the output geometry back onto the input geometry.
    """

    kind = "convT"
    trainable = ("W", "b")

    def __init__(self, filters: int, kernel: int = 3, stride: int = 2):
        self.filters, self.kernel, self.stride = filters, kernel, stride

    def build(self, in_shape, rng):
        c, h, w = in_shape
        k = self.kernel
        W = glorot_uniform(rng, (c, self.filters, k, k), c * k * k, self.filters * k * k)
        return {"W": W, "b": np.zeros(self.filters)}, (self.filters, h * self.stride, w * self.stride)

    def _geom(self, n, h, w):
        out_shape = (n, self.filters, h * self.stride, w * self.stride)
        oh, ph0, ph1 = same_padding(out_shape[2], self.kernel, self.stride)
        ow, pw0, pw1 = same_padding(out_shape[3], self.kernel, self.stride)
        padded = (n, self.filters, out_shape[2] + ph0 + ph1, out_shape[3] + pw0 + pw1)
        return (out_shape, padded, ph0, pw0, oh, ow)

    def forward(self, params, x, training=False, rng=None):
        n, c, h, w = x.shape
        geom = self._geom(n, h, w)
        W2 = params["W"].reshape(c, -1)
        cols = W2.T @ x.reshape(n, c, h * w)
        y = col2im(cols, geom, self.kernel, self.stride) + params["b"][None, :, None, None]
        return y, x

    def backward(self, params, cache, gy, per_example=False):
        x = cache
        n, c, h, w = x.shape
        gcols, _ = im2col(gy, self.kernel, self.stride)
        x2 = x.reshape(n, c, h * w)
        W2 = params["W"].reshape(c, -1)
        per = x2 @ gcols.transpose(0, 2, 1)
        if per_example:
            grads = {"W": per.reshape((n,) + params["W"].shape), "b": gy.sum(axis=(2, 3))}
        else:
            grads = {"W": per.sum(axis=0).reshape(params["W"].shape), "b": gy.sum(axis=(0, 2, 3))}
        gx = (W2 @ gcols).reshape(x.shape)
        return gx, grads


class BatchNorm(Layer):
    """Batch normalisation over the batch (and spatial) axes.

    Running statistics live in the parameter set as non-trainable entries
    and are refreshed by :meth:`state_update` after a training pass.
    """

    kind = "bn"
    trainable = ("gamma", "beta")
    supports_per_example = False

    def __init__(self, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.eps, self.momentum = eps, momentum

    def build(self, in_shape, rng):
        c = in_shape[0]
        return {
            "gamma": np.ones(c),
            "beta": np.zeros(c),
            "running_mean": np.zeros(c),
            "running_var": np.ones(c),
        }, in_shape

    @staticmethod
    def _axes(x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    @staticmethod
    def _bcast(v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, params, x, training=False, rng=None):
        axes = self._axes(x)
        if training:
            mean, var = x.mean(axis=axes), x.var(axis=axes)
        else:
            mean, var = params["running_mean"], params["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv_std, x)
        y = xhat * self._bcast(params["gamma"], x) + self._bcast(params["beta"], x)
        return y, (xhat, inv_std, mean, var, training)

    def state_update(self, cache):
        _, _, mean, var, training = cache
        if not training:
            return {}
        return {"running_mean": (mean, self.momentum), "running_var": (var, self.momentum)}

    def backward(self, params, cache, gy, per_example=False):
        if per_example:
            raise ValueError("batch norm couples examples; per-example gradients are undefined")
        xhat, inv_std, _, _, training = cache
        axes = self._axes(gy)
        grads = {"gamma": (gy * xhat).sum(axis=axes), "beta": gy.sum(axis=axes)}
        dxhat = gy * self._bcast(params["gamma"], gy)
        if not training:
            return dxhat * self._bcast(inv_std, gy), grads
        m = gy.size // gy.shape[1]
        gx = (self._bcast(inv_std / m, gy)
              * (m * dxhat
                 - self._bcast(dxhat.sum(axis=axes), gy)
                 - xhat * self._bcast((dxhat * xhat).sum(axis=axes), gy)))
        return gx, grads


class _Elementwise(Layer):
    def forward(self, params, x, training=False, rng=None):
        y = self.fn(x)
        return y, (x, y)

    def backward(self, params, cache, gy, per_example=False):
        x, y = cache
        return gy * self.deriv(x, y), {}


class ReLU(_Elementwise):
    kind = "relu"

    def fn(self, x):
        return np.maximum(x, 0.0)

    def deriv(self, x, y):
        return (x > 0).astype(np.float64)


class LeakyReLU(_Elementwise):
    kind = "lrelu"

    def __init__(self, alpha: float = LEAKY_ALPHA):
        self.alpha = alpha

    def fn(self, x):
        return np.where(x > 0, x, self.alpha * x)

    def deriv(self, x, y):
        return np.where(x > 0, 1.0, self.alpha)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(_Elementwise):
    kind = "sigmoid"

    def fn(self, x):
        return sigmoid(x)

    def deriv(self, x, y):
        return y * (1.0 - y)


class Tanh(_Elementwise):
    kind = "tanh"

    def fn(self, x):
        return np.tanh(x)

    def deriv(self, x, y):
        return 1.0 - y * y


def softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class Softmax(Layer):
    kind = "softmax"

    def forward(self, params, x, training=False, rng=None):
        y = softmax(x)
        return y, y

    def backward(self, params, cache, gy, per_example=False):
        s = cache
        return s * (gy - (gy * s).sum(axis=-1, keepdims=True)), {}


class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate

    def forward(self, params, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("dropout in training mode needs an rng")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, params, cache, gy, per_example=False):
        return (gy if cache is None else gy * cache), {}


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ragged edges are padded with -inf."""

    kind = "maxpool"

    def __init__(self, size: int = 2):
        self.size = size

    def build(self, in_shape, rng):
        c, h, w = in_shape
        return {}, (c, -(-h // self.size), -(-w // self.size))

    def forward(self, params, x, training=False, rng=None):
        n, c, h, w = x.shape
        p = self.size
        oh, ow = -(-h // p), -(-w // p)
        xp = np.pad(x, ((0, 0), (0, 0), (0, oh * p - h), (0, ow * p - w)), constant_values=-np.inf)
        win = xp.reshape(n, c, oh, p, ow, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, p * p)
        idx = win.argmax(axis=-1)
        y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, params, cache, gy, per_example=False):
        idx, shape = cache
        n, c, h, w = shape
        p = self.size
        oh, ow = gy.shape[2], gy.shape[3]
        win = np.zeros((n, c, oh, ow, p * p))
        np.put_along_axis(win, idx[..., None], gy[..., None], axis=-1)
        gx = win.reshape(n, c, oh, ow, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * p, ow * p)
        return gx[:, :, :h, :w], {}


class Flatten(Layer):
    kind = "flatten"

    def build(self, in_shape, rng):
        return {}, (int(np.prod(in_shape)),)

    def forward(self, params, x, training=False, rng=None):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, params, cache, gy, per_example=False):
        return gy.reshape(cache), {}


class Reshape(Layer):
    kind = "reshape"

    def __init__(self, shape: tuple):
        self.shape = tuple(shape)

    def build(self, in_shape, rng):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {in_shape} to {self.shape}")
        return {}, self.shape

    def forward(self, params, x, training=False, rng=None):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, params, cache, gy, per_example=False):
        return gy.reshape(cache), {}
