"""Layer-graph network engine with hand-written forward and backward passes.

All layer inputs carry a leading batch axis: ``(N, H, W, C)`` for image
layers and ``(N, F)`` for dense layers. Shapes passed to ``build`` and
returned by ``output_shape`` are per-sample (no batch axis).

Backward passes accumulate nothing between calls: ``backward`` overwrites
``layer.grads`` from the cache left by the most recent ``forward``.
"""

from __future__ import annotations

import itertools
import math
from typing import Iterator

import numpy as np

from .errors import DvkError, ShapeError
from .tensor import crop_slices


# -- initialisation ------------------------------------------------------------


def init_lecun(shape, fan_in: int, rng: np.random.Generator, distribution: str = "uniform") -> np.ndarray:
    """LeCun initialisation: variance 1/fan_in, uniform or normal."""
    if fan_in < 1:
        raise ValueError("fan_in must be >= 1")
    if distribution == "uniform":
        bound = math.sqrt(3.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if distribution == "normal":
        return rng.normal(0.0, math.sqrt(1.0 / fan_in), size=shape)
    raise ValueError(f"unknown distribution {distribution!r}")


# -- functional kernels ----------------------------------------------------------


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return x, False


def conv2d_forward(x, weights, bias):
    """Valid 2D cross-correlation (no kernel flip).

    ``T[x, y, o] = sum_{n, m, c} K[n, m, c, o] X[x + n, y + m, c] + b[o]``.
    ``x`` is ``(h, w, c_in)`` or batched ``(N, h, w, c_in)``; weights are
    ``(kh, kw, c_in, c_out)``. Returns ``(output, cache)``.
    """
    xb, squeeze = _batched(x, 4)
    kh, kw, cin, cout = weights.shape
    n, h, w, c = xb.shape
    if c != cin:
        raise ShapeError(f"input has {c} channels, kernel expects {cin}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel dims must be odd, got {(kh, kw)}")
    if h < kh or w < kw:
        raise ShapeError(f"kernel {(kh, kw)} larger than input {(h, w)}")
    ho, wo = h - kh + 1, w - kw + 1
    out = np.zeros((n, ho, wo, cout))
    for i in range(kh):
        for j in range(kw):
            out += xb[:, i:i + ho, j:j + wo, :] @ weights[i, j]
    out += bias
    cache = (xb, weights, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(grad_out, cache):
    """Adjoint of :func:`conv2d_forward`: returns ``(grad_x, grad_weights, grad_bias)``.

    Weight gradients sum over every output position the shared kernel touched.
    """
    xb, weights, squeeze = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if squeeze:
        g = g[None]
    kh, kw, cin, cout = weights.shape
    n, h, w, _ = xb.shape
    ho, wo = h - kh + 1, w - kw + 1
    if g.shape != (n, ho, wo, cout):
        raise ShapeError(f"grad shape {g.shape} does not match forward output {(n, ho, wo, cout)}")
    gflat = g.reshape(-1, cout)
    grad_w = np.empty_like(weights)
    grad_x = np.zeros_like(xb)
    for i in range(kh):
        for j in range(kw):
            window = xb[:, i:i + ho, j:j + wo, :]
            grad_w[i, j] = window.reshape(-1, cin).T @ gflat
            grad_x[:, i:i + ho, j:j + wo, :] += g @ weights[i, j].T
    grad_b = gflat.sum(axis=0)
    return (grad_x[0] if squeeze else grad_x), grad_w, grad_b


def leaky_relu(x, alpha: float = 5.5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, alpha * x)


def leaky_relu_backward(grad, x, alpha: float = 5.5) -> np.ndarray:
    # slope 1 at exactly zero
    return grad * np.where(np.asarray(x) >= 0, 1.0, alpha)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid_backward(grad, y) -> np.ndarray:
    return grad * y * (1.0 - y)


def softmax(x) -> np.ndarray:
    """Softmax over the last axis, shifted by the per-sample max."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad, y) -> np.ndarray:
    return y * (grad - np.sum(grad * y, axis=-1, keepdims=True))


def dense_forward(x, W, b, h=None):
    """``y = h(W x + b)`` for a batch of row vectors; ``W`` is ``(out, in)``."""
    xb, squeeze = _batched(x, 2)
    if W.shape[1] != xb.shape[1]:
        raise ShapeError(f"W has {W.shape[1]} columns but x has {xb.shape[1]} features")
    a = xb @ W.T + b
    y = a if h is None else h(a)
    return (y[0] if squeeze else y), (xb, W, a, squeeze)


def dense_backward(grad_a, cache):
    """Gradient through the affine part; ``grad_a`` is already multiplied by h'(a)."""
    xb, W, _, squeeze = cache
    g = np.asarray(grad_a, dtype=np.float64)
    if squeeze:
        g = g[None]
    grad_x = g @ W
    grad_W = g.T @ xb
    grad_b = g.sum(axis=0)
    return (grad_x[0] if squeeze else grad_x), grad_W, grad_b


def batchnorm_forward(x, gamma, beta, eps: float = 1e-3):
    """Training-mode batch normalisation pooled over every axis but the last.

    For image batches ``(N, p, q, C)`` the per-channel statistics cover
    ``m' = N * p * q`` values.
    """
    x = np.asarray(x, dtype=np.float64)
    axes = tuple(range(x.ndim - 1))
    m = math.prod(x.shape[:-1])
    mean = x.sum(axis=axes) / m
    xc = x - mean
    var = (xc * xc).sum(axis=axes) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    y = gamma * xhat + beta
    return y, (xc, xhat, mean, var, inv_std, gamma, eps, m)


def batchnorm_backward(grad_out, cache):
    """Chain rule through the batch statistics, term by term:

    dL/dxhat   = gamma * dL/dy
    dL/dvar    = sum dL/dxhat * (x - mean) * -1/2 (var + eps)^(-3/2)
    dL/dmean   = sum dL/dxhat * -1/sqrt(var + eps)
    dL/dx      = dL/dxhat / sqrt(var + eps) + dL/dvar * 2 (x - mean) / m + dL/dmean / m
    dL/dgamma  = sum dL/dy * xhat
    dL/dbeta   = sum dL/dy
    """
    xc, xhat, _, var, inv_std, gamma, eps, m = cache
    g = np.asarray(grad_out, dtype=np.float64)
    if g.shape != xc.shape:
        raise ShapeError(f"grad shape {g.shape} does not match forward input {xc.shape}")
    axes = tuple(range(g.ndim - 1))
    d_xhat = gamma * g
    d_var = (d_xhat * xc).sum(axis=axes) * (-0.5) * (var + eps) ** -1.5
    d_mean = (d_xhat * -inv_std).sum(axis=axes)
    d_x = d_xhat * inv_std + d_var * 2.0 * xc / m + d_mean / m
    d_gamma = (g * xhat).sum(axis=axes)
    d_beta = g.sum(axis=axes)
    return d_x, d_gamma, d_beta


def _pool_geometry(shape, pool, stride):
    _, h, w, _ = shape
    (ph, pw), (sh, sw) = pool, stride
    if (h - ph) % sh or (w - pw) % sw or h < ph or w < pw:
        raise ShapeError(f"pool {pool} stride {stride} does not tile input {(h, w)}")
    return (h - ph) // sh + 1, (w - pw) // sw + 1


def avgpool(x, pool=(2, 2), stride=(2, 2)) -> np.ndarray:
    xb, squeeze = _batched(x, 4)
    ho, wo = _pool_geometry(xb.shape, pool, stride)
    (ph, pw), (sh, sw) = pool, stride
    out = np.zeros((xb.shape[0], ho, wo, xb.shape[3]))
    for i in range(ph):
        for j in range(pw):
            out += xb[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :]
    out /= ph * pw
    return out[0] if squeeze else out


def avgpool_backward(grad, in_shape, pool=(2, 2), stride=(2, 2)) -> np.ndarray:
    (ph, pw), (sh, sw) = pool, stride
    g = grad / (ph * pw)
    ho, wo = g.shape[1], g.shape[2]
    out = np.zeros(in_shape)
    for i in range(ph):
        for j in range(pw):
            out[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += g
    return out


def maxpool(x, pool=(2, 2), stride=(2, 2)):
    """Max pooling; returns ``(output, argmax)`` with ties resolved to the first
    window position in row-major order."""
    xb, squeeze = _batched(x, 4)
    ho, wo = _pool_geometry(xb.shape, pool, stride)
    (ph, pw), (sh, sw) = pool, stride
    best = None
    arg = np.zeros((xb.shape[0], ho, wo, xb.shape[3]), dtype=np.int64)
    for k, (i, j) in enumerate(itertools.product(range(ph), range(pw))):
        cand = xb[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :]
        if best is None:
            best = cand.copy()
            continue
        upd = cand > best
        best[upd] = cand[upd]
        arg[upd] = k
    return (best[0] if squeeze else best), arg


def maxpool_backward(grad, arg, in_shape, pool=(2, 2), stride=(2, 2)) -> np.ndarray:
    (ph, pw), (sh, sw) = pool, stride
    ho, wo = grad.shape[1], grad.shape[2]
    out = np.zeros(in_shape)
    for k, (i, j) in enumerate(itertools.product(range(ph), range(pw))):
        out[:, i:i + sh * ho:sh, j:j + sw * wo:sw, :] += np.where(arg == k, grad, 0.0)
    return out


def upsample(x, factors=(2, 2)) -> np.ndarray:
    """Nearest-neighbour replication along the two spatial axes."""
    xb, squeeze = _batched(x, 4)
    fh, fw = factors
    if fh < 1 or fw < 1:
        raise ValueError("upsample factors must be >= 1")
    out = np.repeat(np.repeat(xb, fh, axis=1), fw, axis=2)
    return out[0] if squeeze else out


def upsample_backward(grad, factors=(2, 2)) -> np.ndarray:
    fh, fw = factors
    n, h, w, c = grad.shape
    return grad.reshape(n, h // fh, fh, w // fw, fw, c).sum(axis=(2, 4))


# -- layers ----------------------------------------------------------------------


class Layer:
    """Base layer. Subclasses fill ``params`` (trainable) and ``buffers``."""

    kind = "Layer"

    def __init__(self, name: str | None = None):
        self.name = name or self.kind
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.reg = None
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None
        self._cache = None

    def build(self, in_shape, rng: np.random.Generator) -> tuple[int, ...]:
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(self.output_shape(self.in_shape))
        return self.out_shape

    def output_shape(self, in_shape):
        return in_shape

    def forward(self, x, train: bool, rng=None):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def n_trainable(self) -> int:
        return sum(p.size for p in self.params.values())

    def n_nontrainable(self) -> int:
        return sum(b.size for b in self.buffers.values())

    def __repr__(self):
        return f"{type(self).__name__}({self.name!r}, out={self.out_shape})"


class Conv2D(Layer):
    kind = "Conv2D"

    def __init__(self, filters: int, kernel=(3, 3), name=None, reg=None, init: str = "uniform"):
        super().__init__(name)
        kh, kw = kernel
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel dims must be odd, got {kernel}")
        self.filters, self.kernel, self.reg, self.init = filters, (kh, kw), reg, init

    def output_shape(self, in_shape):
        h, w, _ = in_shape
        kh, kw = self.kernel
        if h < kh or w < kw:
            raise ShapeError(f"{self.name}: kernel {self.kernel} larger than input {in_shape}")
        return (h - kh + 1, w - kw + 1, self.filters)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        kh, kw = self.kernel
        cin = in_shape[2]
        self.params["weights"] = init_lecun((kh, kw, cin, self.filters), kh * kw * cin, rng, self.init)
        self.params["bias"] = np.zeros(self.filters)
        return out

    def forward(self, x, train, rng=None):
        y, self._cache = conv2d_forward(x, self.params["weights"], self.params["bias"])
        return y

    def backward(self, grad):
        gx, gw, gb = conv2d_backward(grad, self._cache)
        self.grads = {"weights": gw, "bias": gb}
        return gx


class Dense(Layer):
    kind = "Dense"

    def __init__(self, units: int, name=None, reg=None, init: str = "uniform"):
        super().__init__(name)
        self.units, self.reg, self.init = units, reg, init

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ShapeError(f"{self.name}: dense input must be flat, got {in_shape}")
        return (self.units,)

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        self.params["W"] = init_lecun((self.units, in_shape[0]), in_shape[0], rng, self.init)
        self.params["b"] = np.zeros(self.units)
        return out

    def forward(self, x, train, rng=None):
        y, self._cache = dense_forward(x, self.params["W"], self.params["b"])
        return y

    def backward(self, grad):
        gx, gW, gb = dense_backward(grad, self._cache)
        self.grads = {"W": gW, "b": gb}
        return gx


class LeakyReLU(Layer):
    kind = "LeakyReLU"

    def __init__(self, alpha: float = 5.5, name=None):
        super().__init__(name)
        if not math.isfinite(alpha):
            raise ValueError("alpha must be finite")
        self.alpha = alpha

    def forward(self, x, train, rng=None):
        self._cache = x
        return leaky_relu(x, self.alpha)

    def backward(self, grad):
        return leaky_relu_backward(grad, self._cache, self.alpha)


class Sigmoid(Layer):
    kind = "Sigmoid"

    def forward(self, x, train, rng=None):
        self._cache = y = sigmoid(x)
        return y

    def backward(self, grad):
        return sigmoid_backward(grad, self._cache)


class Softmax(Layer):
    kind = "Softmax"

    def forward(self, x, train, rng=None):
        self._cache = y = softmax(x)
        return y

    def backward(self, grad):
        return softmax_backward(grad, self._cache)


class BatchNorm(Layer):
    """Per-channel batch normalisation.

    Running statistics start unset; the first training batch initialises them
    and later batches blend in with ``momentum`` (exponential moving average).
    """

    kind = "BatchNorm"

    def __init__(self, eps: float = 1e-3, momentum: float = 0.99, name=None):
        super().__init__(name)
        self.eps, self.momentum = eps, momentum
        self.initialized = False

    def build(self, in_shape, rng):
        out = super().build(in_shape, rng)
        c = in_shape[-1]
        self.params["gamma"] = np.ones(c)
        self.params["beta"] = np.zeros(c)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        return out

    def forward(self, x, train, rng=None):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            y, self._cache = batchnorm_forward(x, gamma, beta, self.eps)
            self._update_running(self._cache[2], self._cache[3])
            return y
        if not self.initialized:
            raise DvkError(f"{self.name}: running statistics are uninitialised; train first")
        inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
        xhat = (x - self.buffers["running_mean"]) * inv_std
        self._cache = ("infer", xhat, inv_std)
        return gamma * xhat + beta

    def _update_running(self, mean, var):
        if not self.initialized:
            self.buffers["running_mean"] = mean.copy()
            self.buffers["running_var"] = var.copy()
            self.initialized = True
            return
        mu = self.momentum
        self.buffers["running_mean"] = mu * self.buffers["running_mean"] + (1 - mu) * mean
        self.buffers["running_var"] = mu * self.buffers["running_var"] + (1 - mu) * var

    def backward(self, grad):
        axes = tuple(range(np.ndim(grad) - 1))
        if isinstance(self._cache[0], str):
            # frozen statistics: a plain per-channel affine map
            _, xhat, inv_std = self._cache
            self.grads = {"gamma": (grad * xhat).sum(axis=axes), "beta": grad.sum(axis=axes)}
            return grad * self.params["gamma"] * inv_std
        gx, gg, gb = batchnorm_backward(grad, self._cache)
        self.grads = {"gamma": gg, "beta": gb}
        return gx


class Dropout(Layer):
    """Inverted dropout: ``rate`` is the drop probability, survivors scale by 1/(1-rate)."""

    kind = "Dropout"

    def __init__(self, rate: float = 0.2, name=None):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"drop rate must lie in [0, 1), got {rate}")
        self.rate = rate
        self.frozen_mask: np.ndarray | None = None

    def forward(self, x, train, rng=None):
        if not train or self.rate == 0.0:
            self._cache = None
            return x
        if self.frozen_mask is not None:
            mask = self.frozen_mask
        else:
            if rng is None:
                raise DvkError(f"{self.name}: training-mode dropout needs a seeded rng")
            mask = (rng.random(x.shape) >= self.rate).astype(np.float64)
        self._cache = mask / (1.0 - self.rate)
        return x * self._cache

    def backward(self, grad):
        return grad if self._cache is None else grad * self._cache


class AvgPool(Layer):
    kind = "AvgPool"

    def __init__(self, pool=(2, 2), stride=None, name=None):
        super().__init__(name)
        self.pool = tuple(pool)
        self.stride = tuple(stride or pool)

    def output_shape(self, in_shape):
        ho, wo = _pool_geometry((1, *in_shape), self.pool, self.stride)
        return (ho, wo, in_shape[2])

    def forward(self, x, train, rng=None):
        self._cache = x.shape
        return avgpool(x, self.pool, self.stride)

    def backward(self, grad):
        return avgpool_backward(grad, self._cache, self.pool, self.stride)


class MaxPool(AvgPool):
    kind = "MaxPool"

    def forward(self, x, train, rng=None):
        y, arg = maxpool(x, self.pool, self.stride)
        self._cache = (x.shape, arg)
        return y

    def backward(self, grad):
        shape, arg = self._cache
        return maxpool_backward(grad, arg, shape, self.pool, self.stride)


class Upsample(Layer):
    kind = "Upsample"

    def __init__(self, factors=(2, 2), name=None):
        super().__init__(name)
        if min(factors) < 1:
            raise ValueError("upsample factors must be >= 1")
        self.factors = tuple(int(f) for f in factors)

    def output_shape(self, in_shape):
        h, w, c = in_shape
        return (h * self.factors[0], w * self.factors[1], c)

    def forward(self, x, train, rng=None):
        return upsample(x, self.factors)

    def backward(self, grad):
        return upsample_backward(grad, self.factors)


class Reshape(Layer):
    """Row-major reinterpretation of each sample."""

    kind = "Reshape"

    def __init__(self, shape, name=None):
        super().__init__(name)
        self.shape = tuple(shape)

    def output_shape(self, in_shape):
        if math.prod(in_shape) != math.prod(self.shape):
            raise ShapeError(f"{self.name}: cannot reshape {in_shape} to {self.shape}")
        return self.shape

    def forward(self, x, train, rng=None):
        return x.reshape((x.shape[0], *self.shape))

    def backward(self, grad):
        return grad.reshape((grad.shape[0], *self.in_shape))


class CenterCrop(Layer):
    kind = "CenterCrop"

    def __init__(self, size, name=None):
        super().__init__(name)
        self.size = tuple(size)

    def output_shape(self, in_shape):
        crop_slices(in_shape[:2], self.size)
        return (*self.size, in_shape[2])

    def forward(self, x, train, rng=None):
        self._cache = x.shape
        return x[(slice(None), *crop_slices(x.shape[1:3], self.size))]

    def backward(self, grad):
        out = np.zeros(self._cache)
        out[(slice(None), *crop_slices(self._cache[1:3], self.size))] = grad
        return out


class MergeLayer(Layer):
    """Layer joining the running activation with an earlier layer's output."""

    def __init__(self, source: int, name=None):
        super().__init__(name)
        self.source = source
        self.skip_shape: tuple[int, ...] | None = None

    def build_merge(self, in_shape, skip_shape, rng):
        self.skip_shape = tuple(skip_shape)
        return self.build(in_shape, rng)

    def forward_merge(self, x, skip, train):
        raise NotImplementedError

    def backward_merge(self, grad):
        raise NotImplementedError


class AddSkip(MergeLayer):
    """Residual junction ``x_deep + x_skip``; gradient passes unchanged to both."""

    kind = "AddSkip"

    def output_shape(self, in_shape):
        if tuple(in_shape) != self.skip_shape:
            raise ShapeError(f"{self.name}: cannot add {in_shape} and {self.skip_shape}")
        return in_shape

    def forward_merge(self, x, skip, train):
        return add_skip(x, skip)

    def backward_merge(self, grad):
        return grad, grad


class ConcatSkip(MergeLayer):
    """Channel concatenation ``[x_deep, x_skip]``, center-cropping the skip branch
    to the deep branch's spatial size when ``crop`` is set."""

    kind = "ConcatSkip"

    def __init__(self, source: int, crop: bool = True, name=None):
        super().__init__(source, name)
        self.crop = crop

    def output_shape(self, in_shape):
        h, w, c = in_shape
        sh, sw, sc = self.skip_shape
        if (sh, sw) != (h, w):
            if not self.crop:
                raise ShapeError(f"{self.name}: spatial mismatch {in_shape} vs {self.skip_shape}")
            crop_slices((sh, sw), (h, w))
        return (h, w, c + sc)

    def forward_merge(self, x, skip, train):
        self._cache = (x.shape[-1], skip.shape)
        if skip.shape[1:3] != x.shape[1:3]:
            skip = skip[(slice(None), *crop_slices(skip.shape[1:3], x.shape[1:3]))]
        return concat_skip(x, skip)

    def backward_merge(self, grad):
        c, skip_shape = self._cache
        g_deep, g_skip = grad[..., :c], grad[..., c:]
        if g_skip.shape != skip_shape:
            full = np.zeros(skip_shape)
            full[(slice(None), *crop_slices(skip_shape[1:3], g_skip.shape[1:3]))] = g_skip
            g_skip = full
        return np.ascontiguousarray(g_deep), np.ascontiguousarray(g_skip)


def add_skip(x_deep, x_skip) -> np.ndarray:
    if np.shape(x_deep) != np.shape(x_skip):
        raise ShapeError(f"cannot add {np.shape(x_deep)} and {np.shape(x_skip)}")
    return np.asarray(x_deep) + np.asarray(x_skip)


def concat_skip(x_deep, x_skip) -> np.ndarray:
    if np.shape(x_deep)[:-1] != np.shape(x_skip)[:-1]:
        raise ShapeError(f"cannot concatenate {np.shape(x_deep)} and {np.shape(x_skip)}")
    return np.concatenate([x_deep, x_skip], axis=-1)


# -- network ---------------------------------------------------------------------


class Trace:
    """Token tying a backward call to the forward pass that produced it."""

    __slots__ = ("generation", "train", "outputs")

    def __init__(self, generation, train, outputs):
        self.generation, self.train, self.outputs = generation, train, outputs


class Network:
    """Ordered layer list, optionally with skip edges into merge layers."""

    def __init__(self, layers, input_shape, seed: int = 0):
        self.layers: list[Layer] = list(layers)
        self.input_shape = tuple(input_shape)
        self.mode = "train"
        self._generation = 0
        rng = np.random.default_rng(seed)
        shapes = [self.input_shape]
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, MergeLayer):
                if not 0 <= layer.source < i:
                    raise ShapeError(f"{layer.name}: skip source {layer.source} is not an earlier layer")
                shape = layer.build_merge(shape, self.layers[layer.source].out_shape, rng)
            else:
                shape = layer.build(shape, rng)
            shapes.append(shape)
        self.output_shape = shape

    def train(self):
        self.mode = "train"
        return self

    def eval(self):
        self.mode = "infer"
        return self

    def forward(self, x, rng: np.random.Generator | None = None):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"network expects samples of shape {self.input_shape}, got {x.shape[1:]}")
        train = self.mode == "train"
        outputs = []
        for layer in self.layers:
            if isinstance(layer, MergeLayer):
                x = layer.forward_merge(x, outputs[layer.source], train)
            else:
                x = layer.forward(x, train, rng)
            outputs.append(x)
        self._generation += 1
        return x, Trace(self._generation, train, outputs)

    def predict(self, x) -> np.ndarray:
        mode = self.mode
        self.mode = "infer"
        try:
            return self.forward(x)[0]
        finally:
            self.mode = mode

    def backward(self, trace: Trace, grad_loss) -> np.ndarray:
        """Fill every layer's ``grads``; returns the gradient w.r.t. the input."""
        if trace.generation != self._generation:
            raise DvkError("stale trace: another forward pass ran since this one")
        if trace.train != (self.mode == "train"):
            raise DvkError("mode changed between forward and backward")
        extra: dict[int, np.ndarray] = {}
        g = np.asarray(grad_loss, dtype=np.float64)
        for i in range(len(self.layers) - 1, -1, -1):
            if i in extra:
                g = g + extra.pop(i)
            layer = self.layers[i]
            if isinstance(layer, MergeLayer):
                g, g_skip = layer.backward_merge(g)
                extra[layer.source] = extra.get(layer.source, 0.0) + g_skip
            else:
                g = layer.backward(g)
        return g

    def named_params(self) -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for pname in layer.params:
                yield f"{i:02d}.{layer.name}.{pname}", layer, pname

    def named_buffers(self) -> Iterator[tuple[str, Layer, str]]:
        for i, layer in enumerate(self.layers):
            for bname in layer.buffers:
                yield f"{i:02d}.{layer.name}.{bname}", layer, bname

    def zero_grads(self):
        for layer in self.layers:
            layer.grads = {k: np.zeros_like(v) for k, v in layer.params.items()}

    def summary(self) -> list[tuple[str, str, tuple[int, ...], int, int]]:
        """(name, kind, per-sample output shape, trainable, non-trainable) for each layer."""
        return [(l.name, l.kind, l.out_shape, l.n_trainable(), l.n_nontrainable()) for l in self.layers]
