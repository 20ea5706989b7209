"""Differentiable primitives: convolution, pooling, normalisation, activations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

from .autograd import Layer
from .errors import ConfigError, DimensionError, DomainError

_SQRT_2PI = np.sqrt(2.0 * np.pi)
_SIGMOID_HI = np.nextafter(1.0, 0.0)
_SIGMOID_LO = np.finfo(np.float64).tiny


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _check_rank(x, ndim, who):
    if x.ndim != ndim:
        raise DimensionError(f"{who}: expected a rank-{ndim} input, got shape {x.shape}")


@dataclass(frozen=True)
class Conv1dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int
    stride: int = 1
    left_pad: int = 0
    right_pad: int = 0
    causal: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_size, self.stride) < 1:
            raise ConfigError(f"conv spec needs positive sizes: {self}")
        if self.left_pad < 0 or self.right_pad < 0:
            raise ConfigError(f"conv spec needs non-negative padding: {self}")
        if self.causal and (self.left_pad != self.kernel_size - 1 or self.right_pad or self.stride != 1):
            raise ConfigError(f"causal conv needs left_pad=K-1, right_pad=0, stride=1: {self}")

    @classmethod
    def make_causal(cls, in_channels, out_channels, kernel_size):
        return cls(in_channels, out_channels, kernel_size, 1, kernel_size - 1, 0, True)

    def output_length(self, length: int) -> int:
        span = length + self.left_pad + self.right_pad - self.kernel_size
        if span < 0:
            raise DimensionError(
                f"conv: padded length {length + self.left_pad + self.right_pad} "
                f"shorter than kernel {self.kernel_size}")
        return span // self.stride + 1


@dataclass(frozen=True)
class PoolSpec:
    kernel_size: int
    stride: int

    def output_length(self, length: int) -> int:
        if length < self.kernel_size:
            raise DimensionError(f"maxpool: length {length} shorter than window {self.kernel_size}")
        return (length - self.kernel_size) // self.stride + 1


class Identity(Layer):
    def forward(self, x):
        self._cache = True
        return x

    def backward(self, upstream):
        self._saved()
        return upstream


class Conv1d(Layer):
    """1-D cross-correlation over ``(N, C_in, L)`` with bias.

    ``input_grad=False`` skips the input gradient, which the first layer
    applied to raw data never needs.
    """

    def __init__(self, spec: Conv1dSpec, rng=None, input_grad: bool = True):
        super().__init__()
        self.spec = spec
        self.input_grad = input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = spec.in_channels * spec.kernel_size
        self.add_param("weight", _uniform_init(rng, (spec.out_channels, spec.in_channels, spec.kernel_size), fan_in))
        self.add_param("bias", _uniform_init(rng, (spec.out_channels,), fan_in))

    def forward(self, x):
        s = self.spec
        _check_rank(x, 3, "conv1d")
        n, c, length = x.shape
        if c != s.in_channels:
            raise DimensionError(f"conv1d: input has {c} channels, spec expects {s.in_channels}")
        out_len = s.output_length(length)
        xp = np.pad(x, ((0, 0), (0, 0), (s.left_pad, s.right_pad))) if (s.left_pad or s.right_pad) else x
        win = sliding_window_view(xp, s.kernel_size, axis=2)[:, :, : s.stride * (out_len - 1) + 1 : s.stride]
        cols = win.transpose(0, 2, 1, 3).reshape(n * out_len, c * s.kernel_size)
        wmat = self.params["weight"].reshape(s.out_channels, -1)
        y = cols @ wmat.T + self.params["bias"]
        self._cache = (cols, x.shape, xp.shape[2], out_len)
        return np.ascontiguousarray(y.reshape(n, out_len, s.out_channels).transpose(0, 2, 1))

    def backward(self, upstream):
        cols, (n, c, length), padded_len, out_len = self._saved()
        s = self.spec
        dy = upstream.transpose(0, 2, 1).reshape(n * out_len, s.out_channels)
        self.grads["weight"] += (dy.T @ cols).reshape(self.params["weight"].shape)
        self.grads["bias"] += upstream.sum(axis=(0, 2))
        if not self.input_grad:
            return None
        k = s.kernel_size
        dcols = (dy @ self.params["weight"].reshape(s.out_channels, -1)).reshape(n, out_len, c, k)
        dxp = np.zeros((n, c, padded_len))
        if k <= out_len:
            stop = s.stride * (out_len - 1) + 1
            for j in range(k):
                dxp[:, :, j : j + stop : s.stride] += dcols[:, :, :, j].transpose(0, 2, 1)
        else:
            for t in range(out_len):
                dxp[:, :, t * s.stride : t * s.stride + k] += dcols[:, t]
        return dxp[:, :, s.left_pad : s.left_pad + length]


class MaxPool1d(Layer):
    """Windowed max over the last axis; ties route the gradient to the lowest index."""

    def __init__(self, kernel_size: int, stride: int):
        super().__init__()
        self.spec = PoolSpec(kernel_size, stride)

    def forward(self, x):
        _check_rank(x, 3, "maxpool1d")
        k, st = self.spec.kernel_size, self.spec.stride
        out_len = self.spec.output_length(x.shape[2])
        win = sliding_window_view(x, k, axis=2)[:, :, : st * (out_len - 1) + 1 : st]
        arg = np.argmax(win, axis=3)
        self._cache = (arg, x.shape)
        return np.take_along_axis(win, arg[..., None], axis=3)[..., 0]

    def kink_signature(self):
        return None if self._cache is None else self._cache[0].tobytes()

    def backward(self, upstream):
        arg, shape = self._saved()
        k, st = self.spec.kernel_size, self.spec.stride
        out_len = arg.shape[2]
        dx = np.zeros(shape)
        stop = st * (out_len - 1) + 1
        for j in range(k):
            dx[:, :, j : j + stop : st] += np.where(arg == j, upstream, 0.0)
        return dx


class BatchNorm1d(Layer):
    """Per-channel batch normalisation over the batch and time axes.

    Training uses the biased batch variance; the running variance is updated
    with the unbiased estimate.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.add_param("gamma", np.ones(channels))
        self.add_param("beta", np.zeros(channels))
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)

    def forward(self, x):
        _check_rank(x, 3, "batchnorm1d")
        if x.shape[1] != self.params["gamma"].size:
            raise DimensionError(f"batchnorm1d: {x.shape[1]} channels, expected {self.params['gamma'].size}")
        g = self.params["gamma"][None, :, None]
        b = self.params["beta"][None, :, None]
        if self.training:
            m = x.shape[0] * x.shape[2]
            if m < 2:
                raise DomainError("batchnorm1d: training mode needs at least two values per channel")
            mu = x.mean(axis=(0, 2))
            var = x.var(axis=(0, 2))
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - self.momentum
            rm += self.momentum * mu
            rv *= 1.0 - self.momentum
            rv += self.momentum * var * m / (m - 1)
        else:
            mu, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu[None, :, None]) * inv_std[None, :, None]
        self._cache = (xhat, inv_std, self.training)
        return xhat * g + b

    def backward(self, upstream):
        xhat, inv_std, training = self._saved()
        self.grads["gamma"] += (upstream * xhat).sum(axis=(0, 2))
        self.grads["beta"] += upstream.sum(axis=(0, 2))
        dxhat = upstream * self.params["gamma"][None, :, None]
        scale = inv_std[None, :, None]
        if not training:
            return dxhat * scale
        m = xhat.shape[0] * xhat.shape[2]
        s1 = dxhat.sum(axis=(0, 2), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        return scale * (dxhat - s1 / m - xhat * s2 / m)


class LayerNorm(Layer):
    """Normalise over the last axis with a learnable per-position gain and bias."""

    def __init__(self, size: int, eps: float = 1e-5):
        super().__init__()
        if size < 2:
            raise DomainError("layernorm: normalised axis must have length >= 2")
        self.eps = eps
        self.add_param("gain", np.ones(size))
        self.add_param("bias", np.zeros(size))

    def forward(self, x):
        if x.shape[-1] != self.params["gain"].size:
            raise DimensionError(f"layernorm: last axis {x.shape[-1]}, expected {self.params['gain'].size}")
        mu = x.mean(axis=-1, keepdims=True)
        inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + self.eps)
        xhat = (x - mu) * inv_std
        self._cache = (xhat, inv_std)
        return xhat * self.params["gain"] + self.params["bias"]

    def backward(self, upstream):
        xhat, inv_std = self._saved()
        lead = tuple(range(upstream.ndim - 1))
        self.grads["gain"] += (upstream * xhat).sum(axis=lead)
        self.grads["bias"] += upstream.sum(axis=lead)
        dxhat = upstream * self.params["gain"]
        m = xhat.shape[-1]
        s1 = dxhat.sum(axis=-1, keepdims=True)
        s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
        return inv_std * (dxhat - s1 / m - xhat * s2 / m)


class Linear(Layer):
    def __init__(self, d_in: int, d_out: int, rng=None, bias: bool = True):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.add_param("weight", _uniform_init(rng, (d_out, d_in), d_in))
        if bias:
            self.add_param("bias", _uniform_init(rng, (d_out,), d_in))

    def forward(self, x):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"linear: input {x.shape} does not end in {self.d_in}")
        flat = x.reshape(-1, self.d_in)
        self._cache = (flat, x.shape)
        y = flat @ self.params["weight"].T
        if "bias" in self.params:
            y += self.params["bias"]
        return y.reshape(*x.shape[:-1], self.d_out)

    def backward(self, upstream):
        flat, shape = self._saved()
        dy = upstream.reshape(-1, self.d_out)
        self.grads["weight"] += dy.T @ flat
        if "bias" in self.params:
            self.grads["bias"] += dy.sum(axis=0)
        return (dy @ self.params["weight"]).reshape(shape)


class ReLU(Layer):
    def kink_signature(self):
        return None if self._cache is None else np.packbits(self._cache).tobytes()

    def forward(self, x):
        self._cache = x > 0
        # np.maximum keeps NaN so non-finite inputs stay visible downstream
        return np.maximum(x, 0.0)

    def backward(self, upstream):
        return np.where(self._saved(), upstream, 0.0)


class Sigmoid(Layer):
    """Logistic function, clipped so outputs stay strictly inside (0, 1)."""

    def forward(self, x):
        y = np.clip(expit(x), _SIGMOID_LO, _SIGMOID_HI)
        self._cache = y
        return y

    def backward(self, upstream):
        y = self._saved()
        return upstream * y * (1.0 - y)


class GELU(Layer):
    """Exact GELU, ``x * Phi(x)`` with the normal CDF (not the tanh approximation)."""

    def forward(self, x):
        cdf = ndtr(x)
        self._cache = (x, cdf)
        return x * cdf

    def backward(self, upstream):
        x, cdf = self._saved()
        pdf = np.exp(-0.5 * x * x) / _SQRT_2PI
        return upstream * (cdf + x * pdf)


class Softmax(Layer):
    """Softmax over the last axis."""

    def forward(self, x):
        y = softmax(x)
        self._cache = y
        return y

    def backward(self, upstream):
        y = self._saved()
        return y * (upstream - (upstream * y).sum(axis=-1, keepdims=True))


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""

    def __init__(self, p: float, seed: int = 0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise DomainError(f"dropout: p must lie in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        if not self.training or self.p == 0.0:
            self._cache = 1.0
            return x
        mask = (self.rng.random(x.shape) >= self.p) / (1.0 - self.p)
        self._cache = mask
        return x * mask

    def backward(self, upstream):
        return upstream * self._saved()


class Sequential(Layer):
    def __init__(self, *layers: tuple[str, Layer]):
        super().__init__()
        for name, layer in layers:
            self.add_child(name, layer)

    def forward(self, x):
        for layer in self.children.values():
            x = layer.forward(x)
        self._cache = True
        return x

    def backward(self, upstream):
        self._saved()
        for layer in reversed(list(self.children.values())):
            upstream = layer.backward(upstream)
        return upstream


# -- functional forms --------------------------------------------------------

def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def gelu(x):
    return x * ndtr(x)


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    return np.clip(expit(x), _SIGMOID_LO, _SIGMOID_HI)


def dropout(p: float, seed: int, training: bool, x: np.ndarray) -> np.ndarray:
    layer = Dropout(p, seed)
    layer.training = training
    return layer.forward(x)
