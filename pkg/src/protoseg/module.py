"""Named-parameter containers and the handful of layers the models share."""

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: walks attributes to enumerate named parameters."""

    def parameters(self, prefix=""):
        """Yield (dotted-name, Tensor) pairs for every learnable weight."""
        for key, val in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.parameters(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def named_parameters(self):
        pairs = list(self.parameters())
        params = dict(pairs)
        if len(params) != len(pairs):
            raise ValueError("duplicate parameter names")
        return params

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()


def uniform_init(rng, shape, scale=None, dtype=np.float64):
    """Small uniform noise; default scale is 1/sqrt(fan_in)."""
    if scale is None:
        fan_in = shape[0] if len(shape) <= 2 else int(np.prod(shape[1:]))
        scale = 1.0 / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-scale, scale, size=shape).astype(dtype),
                  requires_grad=True, dtype=dtype)


def zeros_init(shape, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, dtype=dtype)


class Linear(Module):
    def __init__(self, rng, d_in, d_out, bias=True, zero=False, dtype=np.float64):
        if zero:
            self.w = zeros_init((d_in, d_out), dtype)
        else:
            self.w = uniform_init(rng, (d_in, d_out), dtype=dtype)
        self.b = zeros_init((d_out,), dtype) if bias else None

    def __call__(self, x):
        out = T.matmul(x, self.w)
        if self.b is not None:
            out = out + self.b
        return out


class Conv2dLayer(Module):
    def __init__(self, rng, c_in, c_out, k, stride=1, pad=0, zero=False, dtype=np.float64):
        if zero:
            self.w = zeros_init((c_out, c_in, k, k), dtype)
        else:
            self.w = uniform_init(rng, (c_out, c_in, k, k), dtype=dtype)
        self.b = zeros_init((c_out,), dtype)
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class LayerNorm(Module):
    """Normalizes the last axis; learned affine."""

    def __init__(self, dim, eps=1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = zeros_init((dim,), dtype)
        self.eps = eps

    def __call__(self, x):
        mu = T.reduce_mean(x, axis=-1, keepdims=True)
        xc = x - mu
        var = T.reduce_mean(T.square(xc), axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


class ChannelNorm(Module):
    """Per-channel normalization over spatial dims of a [C,H,W] map; learned affine."""

    def __init__(self, channels, eps=1e-5, dtype=np.float64):
        self.gamma = Tensor(np.ones((channels, 1, 1), dtype=dtype), requires_grad=True, dtype=dtype)
        self.beta = zeros_init((channels, 1, 1), dtype)
        self.eps = eps

    def __call__(self, x):
        mu = T.reduce_mean(T.reshape(x, x.shape[0], -1), axis=1, keepdims=True)
        mu = T.reshape(mu, x.shape[0], 1, 1)
        xc = x - mu
        var = T.reduce_mean(T.reshape(T.square(xc), x.shape[0], -1), axis=1, keepdims=True)
        var = T.reshape(var, x.shape[0], 1, 1)
        return xc / T.sqrt(var + self.eps) * self.gamma + self.beta


class Adam:
    """Plain Adam over a named-parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self):
        self.t += 1
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
