"""Layer vocabulary of the encoder-decoder with explicit reverse-mode rules.

Layers hold no arrays.  Parameters live in a flat ``{name: array}`` mapping
owned by :class:`nrced.model.ModelParams`; each layer reads its entries in
``forward`` and returns gradients keyed the same way from ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels


@dataclass
class Context:
    """Per-call forward settings and side outputs."""

    train: bool
    rng: np.random.Generator | None = None
    bn_stats: dict = field(default_factory=dict)


class Layer:
    name = ""
    param_names: tuple = ()

    def init(self, rng):
        return {}

    def forward(self, p, x, ctx):
        raise NotImplementedError

    def backward(self, p, dy, cache):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"


def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Layer):
    def __init__(self, name, cin, cout, kernel):
        self.name, self.cin, self.cout = name, cin, cout
        self.kernel = tuple(kernel)
        self.param_names = (f"{name}.weight", f"{name}.bias")

    def init(self, rng):
        kh, kw = self.kernel
        return {self.param_names[0]: _uniform(rng, self.cin * kh * kw, (self.cout, self.cin, kh, kw)),
                self.param_names[1]: np.zeros(self.cout)}

    def forward(self, p, x, ctx):
        w, b = p[self.param_names[0]], p[self.param_names[1]]
        return kernels.conv2d_forward(x, w, b), x

    def backward(self, p, dy, x):
        w = p[self.param_names[0]]
        dw = kernels.conv2d_grad_weight(x, dy, *self.kernel)
        db = dy.sum(axis=(0, 2, 3))
        return kernels.conv2d_grad_input(dy, w), {self.param_names[0]: dw, self.param_names[1]: db}


class ConvTranspose2d(Layer):
    """Stride-1 transposed convolution; weight layout ``(in, out, kh, kw)``.

    The forward map is the adjoint of :class:`Conv2d` with the same weight.
    """

    def __init__(self, name, cin, cout, kernel):
        self.name, self.cin, self.cout = name, cin, cout
        self.kernel = tuple(kernel)
        self.param_names = (f"{name}.weight", f"{name}.bias")

    def init(self, rng):
        kh, kw = self.kernel
        return {self.param_names[0]: _uniform(rng, self.cin * kh * kw, (self.cin, self.cout, kh, kw)),
                self.param_names[1]: np.zeros(self.cout)}

    def forward(self, p, x, ctx):
        w, b = p[self.param_names[0]], p[self.param_names[1]]
        y = kernels.conv2d_grad_input(x, w)
        return y + b[None, :, None, None], x

    def backward(self, p, dy, x):
        w = p[self.param_names[0]]
        zero = np.zeros(w.shape[0], dtype=dy.dtype)
        dx = kernels.conv2d_forward(dy, w, zero)
        dw = kernels.conv2d_grad_weight(dy, x, *self.kernel)
        db = dy.sum(axis=(0, 2, 3))
        return dx, {self.param_names[0]: np.ascontiguousarray(dw), self.param_names[1]: db}


class Linear(Layer):
    """``y = x @ W.T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, name, fin, fout):
        self.name, self.fin, self.fout = name, fin, fout
        self.param_names = (f"{name}.weight", f"{name}.bias")

    def init(self, rng):
        return {self.param_names[0]: _uniform(rng, self.fin, (self.fout, self.fin)),
                self.param_names[1]: np.zeros(self.fout)}

    def forward(self, p, x, ctx):
        w, b = p[self.param_names[0]], p[self.param_names[1]]
        return x @ w.T + b, x

    def backward(self, p, dy, x):
        w = p[self.param_names[0]]
        return dy @ w, {self.param_names[0]: dy.T @ x, self.param_names[1]: dy.sum(axis=0)}


class BatchNorm(Layer):
    """Per-channel (4-D input) or per-feature (2-D input) batch normalisation.

    Running statistics are not touched here: train-mode forwards report the
    batch mean and variance through ``ctx.bn_stats`` and the trainer folds
    them in with :func:`update_running_stats`.
    """

    def __init__(self, name, n, eps=1e-5):
        self.name, self.n, self.eps = name, n, eps
        self.param_names = (f"{name}.gamma", f"{name}.beta")
        self.state_names = (f"{name}.running_mean", f"{name}.running_var")

    def init(self, rng):
        return {self.param_names[0]: np.ones(self.n), self.param_names[1]: np.zeros(self.n)}

    def init_state(self):
        return {self.state_names[0]: np.zeros(self.n), self.state_names[1]: np.ones(self.n)}

    @staticmethod
    def _shape(x):
        if x.ndim == 4:
            return (0, 2, 3), (1, -1, 1, 1)
        return (0,), (1, -1)

    def forward(self, p, x, ctx):
        axes, bshape = self._shape(x)
        gamma = p[self.param_names[0]].reshape(bshape)
        beta = p[self.param_names[1]].reshape(bshape)
        if ctx.train:
            mu = x.mean(axis=axes)
            var = x.var(axis=axes)
            ctx.bn_stats[self.name] = (mu, var)
        else:
            mu = p.state[self.state_names[0]]
            var = p.state[self.state_names[1]]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mu.reshape(bshape)) * inv_std.reshape(bshape)
        return gamma * xhat + beta, (xhat, inv_std, ctx.train)

    def backward(self, p, dy, cache):
        xhat, inv_std, train = cache
        axes, bshape = self._shape(dy)
        gamma = p[self.param_names[0]]
        dgamma = (dy * xhat).sum(axis=axes)
        dbeta = dy.sum(axis=axes)
        dxhat = dy * gamma.reshape(bshape)
        if train:
            dx = (dxhat - dxhat.mean(axis=axes, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)) * inv_std.reshape(bshape)
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, {self.param_names[0]: dgamma, self.param_names[1]: dbeta}


class Tanh(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, p, x, ctx):
        y = np.tanh(x)
        return y, y

    def backward(self, p, dy, y):
        return dy * (1.0 - y * y), {}


class Dropout(Layer):
    """Inverted dropout; identity in eval mode or when the rate is zero."""

    def __init__(self, name, rate):
        self.name, self.rate = name, float(rate)

    def forward(self, p, x, ctx):
        if not ctx.train or self.rate == 0.0:
            return x, None
        if ctx.rng is None:
            raise ValueError("train-mode dropout needs a random generator")
        keep = 1.0 - self.rate
        mask = (ctx.rng.random(x.shape) < keep) / keep
        return x * mask, mask

    def backward(self, p, dy, mask):
        return (dy if mask is None else dy * mask), {}


class MaxPool2x2(Layer):
    def __init__(self, name):
        self.name = name

    def forward(self, p, x, ctx):
        return kernels.maxpool2x2_forward(x)

    def backward(self, p, dy, idx):
        return kernels.maxpool2x2_backward(dy, idx), {}


class Upsample2x(Layer):
    """Nearest-neighbour upsampling by two in both spatial axes."""

    def __init__(self, name):
        self.name = name

    def forward(self, p, x, ctx):
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3), None

    def backward(self, p, dy, cache):
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)), {}


class Reshape(Layer):
    def __init__(self, name, shape):
        self.name, self.shape = name, tuple(shape)

    def forward(self, p, x, ctx):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, dy, in_shape):
        return dy.reshape(in_shape), {}


def update_running_stats(layers, state, bn_stats, momentum):
    """Blend batch statistics into running ones: ``r = m * r + (1 - m) * batch``."""
    for layer in layers:
        if isinstance(layer, BatchNorm) and layer.name in bn_stats:
            mu, var = bn_stats[layer.name]
            rm, rv = layer.state_names
            state[rm] = momentum * state[rm] + (1.0 - momentum) * mu
            state[rv] = momentum * state[rv] + (1.0 - momentum) * var
