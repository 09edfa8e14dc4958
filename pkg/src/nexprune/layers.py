"""Layer primitives with explicit forward/backward passes.

Activations are NCHW (or NF after flatten).  Every layer keeps the cache it
needs for one backward call; calling ``backward`` without a preceding
``forward`` raises :class:`BackwardBeforeForwardError`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import BackwardBeforeForwardError, ShapeMismatchError

DTYPE = np.float32


def _pair(v):
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


class Layer:
    kind = "layer"

    def __init__(self, name: str, inputs: list[str]):
        self.name = name
        self.inputs = list(inputs)
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def hparams(self) -> dict:
        return {}

    def output_shape(self, in_shapes: list[tuple]) -> tuple:
        return in_shapes[0]

    def forward(self, xs: list[np.ndarray], train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> list[np.ndarray]:
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise BackwardBeforeForwardError(f"{self.name}: backward called without forward")
        cache, self._cache = self._cache, None
        return cache

    def clear_cache(self):
        self._cache = None

    def __repr__(self):
        hp = ", ".join(f"{k}={v}" for k, v in self.hparams().items())
        return f"{type(self).__name__}({self.name!r}, {hp})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name, inputs, in_channels, out_channels, kernel_size=3,
                 stride=1, padding=0, bias=True):
        super().__init__(name, inputs)
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = _pair(kernel_size)
        self.stride = int(stride)
        self.padding = int(padding)
        m, n = self.kernel_size
        self.params["weight"] = np.zeros((self.out_channels, self.in_channels, m, n), DTYPE)
        if bias:
            self.params["bias"] = np.zeros(self.out_channels, DTYPE)
        # original filter indices, kept across pruning so scores stay addressable
        self.channel_ids = np.arange(self.out_channels)

    def hparams(self):
        return {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": list(self.kernel_size),
            "stride": self.stride,
            "padding": self.padding,
            "bias": "bias" in self.params,
        }

    def output_shape(self, in_shapes):
        c, h, w = in_shapes[0]
        if c != self.in_channels:
            raise ShapeMismatchError(
                f"{self.name}: expects {self.in_channels} input channels, got {c}")
        m, n = self.kernel_size
        ho = (h + 2 * self.padding - m) // self.stride + 1
        wo = (w + 2 * self.padding - n) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError(f"{self.name}: input {h}x{w} too small for kernel {m}x{n}")
        return (self.out_channels, ho, wo)

    def _cols(self, x):
        p, s = self.padding, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, self.kernel_size, axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo, m, k = win.shape
        # rows ordered (in-channel, ky, kx), columns ordered (sample, y, x)
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * m * k, n * ho * wo)
        return cols, x.shape, (n, ho, wo)

    def forward(self, xs, train=False):
        x = xs[0]
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"{self.name}: expected (N, {self.in_channels}, H, W), got {x.shape}")
        cols, padded_shape, (n, ho, wo) = self._cols(x)
        wmat = self.params["weight"].reshape(self.out_channels, -1)
        out = wmat @ cols
        if "bias" in self.params:
            out += self.params["bias"][:, None]
        self._cache = (cols, padded_shape)
        return np.ascontiguousarray(out.reshape(self.out_channels, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, dy):
        cols, padded_shape = self._take_cache()
        n, o, ho, wo = dy.shape
        d2 = np.ascontiguousarray(dy.transpose(1, 0, 2, 3)).reshape(o, -1)
        w = self.params["weight"]
        self.grads["weight"] = (d2 @ cols.T).reshape(w.shape)
        if "bias" in self.params:
            self.grads["bias"] = d2.sum(axis=1)
        m, k = self.kernel_size
        s, p = self.stride, self.padding
        dcols = (w.reshape(o, -1).T @ d2).reshape(self.in_channels, m, k, n, ho, wo)
        c_, n_, hp, wp = padded_shape[1], padded_shape[0], padded_shape[2], padded_shape[3]
        dxp = np.zeros((c_, n_, hp, wp), dtype=dy.dtype)
        for i in range(m):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[:, i, j]
        if p:
            dxp = dxp[:, :, p:-p, p:-p]
        return [np.ascontiguousarray(dxp.transpose(1, 0, 2, 3))]


class BatchNorm2d(Layer):
    kind = "batchnorm2d"

    def __init__(self, name, inputs, channels, eps=1e-5, momentum=0.1):
        super().__init__(name, inputs)
        self.channels = int(channels)
        self.eps = float(eps)
        self.momentum = float(momentum)
        self.params["weight"] = np.ones(self.channels, DTYPE)
        self.params["bias"] = np.zeros(self.channels, DTYPE)
        self.buffers["running_mean"] = np.zeros(self.channels, DTYPE)
        self.buffers["running_var"] = np.ones(self.channels, DTYPE)
        self.buffers["num_batches_tracked"] = np.zeros(1, DTYPE)

    def hparams(self):
        return {"channels": self.channels, "eps": self.eps, "momentum": self.momentum}

    def output_shape(self, in_shapes):
        if in_shapes[0][0] != self.channels:
            raise ShapeMismatchError(
                f"{self.name}: expects {self.channels} channels, got {in_shapes[0][0]}")
        return in_shapes[0]

    @property
    def has_statistics(self) -> bool:
        return bool(self.buffers["num_batches_tracked"][0] > 0)

    def forward(self, xs, train=False, update_stats=True):
        """Normalize per channel.

        ``train=True`` uses batch statistics (and, with ``update_stats``,
        refreshes the running averages); otherwise the running statistics.
        """
        x = xs[0]
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(f"{self.name}: expected {self.channels} channels, got {x.shape}")
        gamma = self.params["weight"][None, :, None, None]
        beta = self.params["bias"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if update_stats:
                count = x.size // self.channels
                unbiased = var * (count / max(count - 1, 1))
                mom = self.momentum
                self.buffers["running_mean"] = ((1 - mom) * self.buffers["running_mean"] + mom * mean).astype(DTYPE)
                self.buffers["running_var"] = ((1 - mom) * self.buffers["running_var"] + mom * unbiased).astype(DTYPE)
                self.buffers["num_batches_tracked"] = self.buffers["num_batches_tracked"] + 1
        else:
            mean = self.buffers["running_mean"].astype(x.dtype)
            var = self.buffers["running_var"].astype(x.dtype)
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, train)
        return gamma * xhat + beta

    def backward(self, dy):
        xhat, inv_std, train = self._take_cache()
        gamma = self.params["weight"]
        self.grads["weight"] = (dy * xhat).sum(axis=(0, 2, 3))
        self.grads["bias"] = dy.sum(axis=(0, 2, 3))
        dxhat = dy * gamma[None, :, None, None]
        if not train:
            return [dxhat * inv_std[None, :, None, None]]
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        dx = (dxhat - s1 / m - xhat * s2 / m) * inv_std[None, :, None, None]
        return [dx]


class ReLU(Layer):
    kind = "relu"

    def forward(self, xs, train=False):
        x = xs[0]
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        mask = self._take_cache()
        return [dy * mask]


class _Pool2d(Layer):
    def __init__(self, name, inputs, kernel_size=2, stride=None):
        super().__init__(name, inputs)
        self.kernel_size = _pair(kernel_size)
        self.stride = int(stride) if stride is not None else self.kernel_size[0]

    def hparams(self):
        return {"kernel_size": list(self.kernel_size), "stride": self.stride}

    def output_shape(self, in_shapes):
        c, h, w = in_shapes[0]
        m, n = self.kernel_size
        ho = (h - m) // self.stride + 1
        wo = (w - n) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeMismatchError(f"{self.name}: input {h}x{w} smaller than window {m}x{n}")
        return (c, ho, wo)

    def _windows(self, x):
        s = self.stride
        win = sliding_window_view(x, self.kernel_size, axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo, m, k = win.shape
        return win.reshape(n, c, ho, wo, m * k)


class MaxPool2d(_Pool2d):
    kind = "maxpool2d"

    def forward(self, xs, train=False):
        x = xs[0]
        win = self._windows(x)
        idx = win.argmax(axis=-1)
        out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return np.ascontiguousarray(out)

    def backward(self, dy):
        idx, in_shape = self._take_cache()
        m, k = self.kernel_size
        s = self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(in_shape, dtype=dy.dtype)
        for i in range(m):
            for j in range(k):
                hit = idx == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += dy * hit
        return [dx]


class AvgPool2d(_Pool2d):
    kind = "avgpool2d"

    def forward(self, xs, train=False):
        x = xs[0]
        self._cache = x.shape
        return np.ascontiguousarray(self._windows(x).mean(axis=-1))

    def backward(self, dy):
        in_shape = self._take_cache()
        m, k = self.kernel_size
        s = self.stride
        ho, wo = dy.shape[2], dy.shape[3]
        dx = np.zeros(in_shape, dtype=dy.dtype)
        share = dy / (m * k)
        for i in range(m):
            for j in range(k):
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += share
        return [dx]


class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shapes):
        return (int(np.prod(in_shapes[0])),)

    def forward(self, xs, train=False):
        x = xs[0]
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return [dy.reshape(self._take_cache())]


class Linear(Layer):
    kind = "linear"

    def __init__(self, name, inputs, in_features, out_features, bias=True):
        super().__init__(name, inputs)
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.params["weight"] = np.zeros((self.out_features, self.in_features), DTYPE)
        if bias:
            self.params["bias"] = np.zeros(self.out_features, DTYPE)

    def hparams(self):
        return {"in_features": self.in_features, "out_features": self.out_features,
                "bias": "bias" in self.params}

    def output_shape(self, in_shapes):
        if in_shapes[0] != (self.in_features,):
            raise ShapeMismatchError(
                f"{self.name}: expects ({self.in_features},) input, got {in_shapes[0]}")
        return (self.out_features,)

    def forward(self, xs, train=False):
        x = xs[0]
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeMismatchError(f"{self.name}: expected (N, {self.in_features}), got {x.shape}")
        self._cache = x
        y = x @ self.params["weight"].T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y

    def backward(self, dy):
        x = self._take_cache()
        self.grads["weight"] = dy.T @ x
        if "bias" in self.params:
            self.grads["bias"] = dy.sum(axis=0)
        return [dy @ self.params["weight"]]


class Add(Layer):
    """Residual fan-in: elementwise sum of identically shaped operands."""

    kind = "add"

    def output_shape(self, in_shapes):
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if s != first:
                raise ShapeMismatchError(f"{self.name}: operand shapes differ: {in_shapes}")
        return first

    def forward(self, xs, train=False):
        for x in xs[1:]:
            if x.shape != xs[0].shape:
                raise ShapeMismatchError(f"{self.name}: operand shapes differ")
        self._cache = len(xs)
        out = xs[0].copy()
        for x in xs[1:]:
            out += x
        return out

    def backward(self, dy):
        n = self._take_cache()
        return [dy] * n


LAYER_KINDS = {
    cls.kind: cls
    for cls in (Conv2d, BatchNorm2d, ReLU, MaxPool2d, AvgPool2d, Flatten, Linear, Add)
}


def layer_from_spec(spec: dict) -> Layer:
    kind = spec["kind"]
    if kind not in LAYER_KINDS:
        raise ValueError(f"unknown layer kind {kind!r}")
    hp = dict(spec.get("hparams", {}))
    return LAYER_KINDS[kind](spec["name"], spec.get("inputs", []), **hp)
