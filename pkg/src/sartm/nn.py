"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Walks attributes to find parameters, like a very small ``torch.nn.Module``.

    Any :class:`Tensor` attribute counts as a parameter; frozen ones simply have
    ``requires_grad=False``. Lists, tuples and dicts of modules or tensors are
    traversed with their index/key in the name.
    """

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self):
        return {n: p for n, p in self.named_parameters() if p.requires_grad}

    def frozen_parameters(self):
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    def state_dict(self):
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
        return self

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(prefix=name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


def param(data, trainable=True, dtype=None):
    return Tensor(np.asarray(data, dtype=dtype or T.get_default_dtype()), requires_grad=trainable)


def uniform(rng, shape, bound, trainable=True):
    return param(rng.uniform(-bound, bound, size=shape), trainable)


def zeros(shape, trainable=True):
    return param(np.zeros(shape), trainable)


def ones(shape, trainable=True):
    return param(np.ones(shape), trainable)


class Linear(Module):
    """``x @ weight + bias`` with ``weight`` stored as ``in × out``."""

    def __init__(self, rng, d_in, d_out, bias=True, trainable=True):
        bound = 1.0 / np.sqrt(d_in)
        self.weight = uniform(rng, (d_in, d_out), bound, trainable)
        self.bias = uniform(rng, (d_out,), bound, trainable) if bias else None

    def forward(self, x):
        y = T.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm(Module):
    def __init__(self, dim, trainable=True, eps=1e-5):
        self.weight = ones((dim,), trainable)
        self.bias = zeros((dim,), trainable)
        self._eps = eps

    def forward(self, x):
        return T.layer_norm(x, self.weight, self.bias, eps=self._eps)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel=1, stride=1, pad=None, bias=True, trainable=True):
        fan_in = c_in * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = uniform(rng, (c_out, c_in, kernel, kernel), bound, trainable)
        self.bias = uniform(rng, (c_out,), bound, trainable) if bias else None
        self._stride = stride
        self._pad = kernel // 2 if pad is None else pad

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self._stride, pad=self._pad)


class MLP(Module):
    def __init__(self, rng, dim, hidden, trainable=True):
        self.fc1 = Linear(rng, dim, hidden, trainable=trainable)
        self.fc2 = Linear(rng, hidden, dim, trainable=trainable)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))
