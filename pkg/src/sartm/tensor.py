"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable primitive is a :class:`Function` subclass with a
``forward`` on raw numpy arrays and a ``backward`` that maps the output
gradient to one gradient per input. Subclasses that set ``name`` are added
to :data:`OPS`, which the gradient checker uses as its coverage list.

The graph is recorded implicitly: an output that depends on a tensor with
``requires_grad`` keeps a :class:`Node` pointing at its inputs. Calling
:func:`backward` linearises the reachable nodes into a :class:`Tape`,
replays it in reverse and then frees it.
"""

from __future__ import annotations

import contextlib
import functools
import math

import numpy as np

from .errors import ContractError, DomainError, GeometryError, ShapeError

OPS: dict[str, type["Function"]] = {}

_state = {"grad_enabled": True, "dtype": np.dtype(np.float32)}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


def is_grad_enabled():
    return _state["grad_enabled"]


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    _state["dtype"] = np.dtype(dtype)


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for tensors built from Python data."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


class Tensor:
    """An n-dimensional array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, np.ndarray) and data.dtype.kind == "f":
                dtype = data.dtype
            else:
                dtype = _state["dtype"]
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._node = None

    @classmethod
    def _from_op(cls, data, requires_grad):
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        return t

    # -- array-like surface -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -1, -2)

    def backward(self):
        backward(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Node:
    __slots__ = ("fn", "inputs")

    def __init__(self, fn, inputs):
        self.fn = fn
        self.inputs = inputs


class Tape:
    """Recorded operations reachable from a root, in topological order."""

    def __init__(self, outputs):
        self.outputs = outputs

    @classmethod
    def from_root(cls, root):
        order = []
        seen = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen or t._node is None:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    @property
    def nodes(self):
        return [t._node for t in self.outputs]

    def __len__(self):
        return len(self.outputs)

    def free(self):
        for t in self.outputs:
            t._node = None
        self.outputs = []


def backward(loss):
    """Populate ``.grad`` on every leaf tensor with ``requires_grad`` that feeds ``loss``."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if not loss.requires_grad:
            raise ContractError("loss is not on the tape: nothing requires grad")
        _accumulate(loss, seed)
        return
    tape = Tape.from_root(loss)
    grads = {id(loss): seed}
    for out in reversed(tape.outputs):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        node = out._node
        in_grads = node.fn.backward(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate(t, gi)
            else:
                key = id(t)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
    tape.free()


def _accumulate(t, g):
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.shape:
        g = np.broadcast_to(g, t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` undoing numpy broadcasting."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Function:
    """Base class of differentiable primitives."""

    name = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            OPS[cls.name] = cls

    @classmethod
    def apply(cls, *inputs, **params):
        fn = cls()
        tensors = tuple(as_tensor(x) for x in inputs)
        data = fn.forward(*(t.data for t in tensors), **params)
        needs_grad = _state["grad_enabled"] and any(t.requires_grad for t in tensors)
        out = Tensor._from_op(data, needs_grad)
        if needs_grad:
            out._node = Node(fn, tensors)
        return out

    def forward(self, *arrays, **params):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _coerce(a, b):
    """Wrap Python scalars with the dtype of the tensor operand."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


class Add(Function):
    name = "add"

    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        self.shapes = a.shape, b.shape
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return unbroadcast(g * self.b, self.a.shape), unbroadcast(g * self.a, self.b.shape)


class Div(Function):
    name = "div"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = g / self.b
        gb = -g * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


class Neg(Function):
    name = "neg"

    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


def add(a, b):
    return Add.apply(*_coerce(a, b))


def sub(a, b):
    return Sub.apply(*_coerce(a, b))


def mul(a, b):
    return Mul.apply(*_coerce(a, b))


def div(a, b):
    return Div.apply(*_coerce(a, b))


def neg(a):
    return Neg.apply(a)


class Exp(Function):
    name = "exp"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    name = "log"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Relu(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, 0).astype(a.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


_GELU_C = math.sqrt(2.0 / math.pi)


class Gelu(Function):
    """Tanh approximation of GELU."""

    name = "gelu"

    def forward(self, a):
        self.a = a
        self.t = np.tanh(_GELU_C * (a + 0.044715 * a**3))
        return 0.5 * a * (1.0 + self.t)

    def backward(self, g):
        a, t = self.a, self.t
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * dt),)


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def relu(a):
    return Relu.apply(a)


def gelu(a):
    return Gelu.apply(a)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        a, b = self.a, self.b
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return unbroadcast(ga, a.shape), unbroadcast(gb, b.shape)


def matmul(a, b):
    return MatMul.apply(a, b)


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


class Sum(Function):
    name = "sum"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.asarray(a.sum(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g, self.shape),)


class Mean(Function):
    name = "mean"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axes = _norm_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes]))
        return np.asarray(a.mean(axis=self.axes, keepdims=keepdims))

    def backward(self, g):
        if not self.keepdims:
            g = np.expand_dims(g, self.axes)
        return (np.broadcast_to(g / self.count, self.shape),)


class Reshape(Function):
    name = "reshape"

    def forward(self, a, shape):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, a, axes=None):
        self.axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(a, self.axes)

    def backward(self, g):
        return (np.transpose(g, np.argsort(self.axes)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.splits = np.cumsum([x.shape[axis] for x in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


class GetItem(Function):
    name = "getitem"

    def forward(self, a, index=None):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, g):
        out = np.zeros(self.shape, dtype=self.dtype)
        np.add.at(out, self.index, g)
        return (out,)


class Take(Function):
    """Gather from the flattened input; repeated indices accumulate."""

    name = "take"

    def forward(self, a, indices=None):
        self.shape, self.dtype = a.shape, a.dtype
        self.indices = np.asarray(indices, dtype=np.intp)
        return a.reshape(-1)[self.indices]

    def backward(self, g):
        out = np.zeros(int(np.prod(self.shape)), dtype=self.dtype)
        np.add.at(out, self.indices, g)
        return (out.reshape(self.shape),)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def reshape(a, shape):
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a, axes=None):
    return Transpose.apply(a, axes=axes)


def swapaxes(a, i, j):
    axes = list(range(as_tensor(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def getitem(a, index):
    return GetItem.apply(a, index=index)


def take(a, indices):
    return Take.apply(a, indices=indices)


# ---------------------------------------------------------------------------
# normalisation, softmax, distances
# ---------------------------------------------------------------------------


class LayerNorm(Function):
    name = "layer_norm"

    def forward(self, x, weight, bias, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = xc * self.inv
        self.weight = weight
        self.bshape = bias.shape
        return self.xhat * weight + bias

    def backward(self, g):
        xhat = self.xhat
        lead = tuple(range(g.ndim - 1))
        gw = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        dxhat = g * self.weight
        gx = self.inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, gw, gb.reshape(self.bshape)


def layer_norm(x, weight, bias, eps=1e-5):
    return LayerNorm.apply(x, weight, bias, eps=eps)


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        self.out = e / e.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        y = self.out
        return (y * (g - (g * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        z = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
        out = z - lse
        self.prob = np.exp(out)
        return out

    def backward(self, g):
        return (g - self.prob * g.sum(axis=self.axis, keepdims=True),)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


class CosineSimilarity(Function):
    """Pairwise cosine similarity between the rows of a 2-D input."""

    name = "cosine_similarity"

    def forward(self, x, eps=1e-12):
        if x.ndim != 2:
            raise ShapeError(f"cosine_similarity expects a matrix, got shape {x.shape}")
        self.norm = np.maximum(np.sqrt((x * x).sum(axis=1, keepdims=True)), eps)
        self.xhat = x / self.norm
        return self.xhat @ self.xhat.T

    def backward(self, g):
        xhat = self.xhat
        dxhat = (g + g.T) @ xhat
        dx = (dxhat - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)) / self.norm
        return (dx,)


def cosine_similarity(x):
    return CosineSimilarity.apply(x)


class KLDiv(Function):
    """Mean over rows of KL(target || input), input given as log-probabilities.

    Terms with zero target probability contribute zero.
    """

    name = "kl_div"

    def forward(self, target, log_input):
        if target.shape != log_input.shape:
            raise ShapeError(f"kl_div: shapes {target.shape} and {log_input.shape} differ")
        self.target = target
        self.rows = int(np.prod(target.shape[:-1])) if target.ndim > 1 else 1
        pos = target > 0
        self.log_target = np.where(pos, np.log(np.where(pos, target, 1)), 0)
        self.log_input = log_input
        terms = np.where(pos, target * (self.log_target - log_input), 0)
        return np.asarray(terms.sum() / self.rows, dtype=target.dtype)

    def backward(self, g):
        scale = g / self.rows
        gt = np.where(self.target > 0, self.log_target - self.log_input + 1.0, 0) * scale
        gi = -self.target * scale
        return gt, gi


def kl_div(target, log_input):
    return KLDiv.apply(target, log_input)


# ---------------------------------------------------------------------------
# spatial operators
# ---------------------------------------------------------------------------


def _out_extent(n, k, stride, pad):
    span = n + 2 * pad - k
    if span < 0 or span % stride:
        raise GeometryError(
            f"extent {n} with kernel {k}, stride {stride}, pad {pad} gives a non-integral output"
        )
    return span // stride + 1


class Conv2d(Function):
    """Cross-correlation of an NCHW input with an OIkk kernel."""

    name = "conv2d"

    def forward(self, x, w, b=None, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
            raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
        n, c, h, wd = x.shape
        o, _, k, _ = w.shape
        ho = _out_extent(h, k, stride, pad)
        wo = _out_extent(wd, k, stride, pad)
        self.xshape, self.k, self.stride, self.pad = x.shape, k, stride, pad
        self.w = w
        self.has_bias = b is not None
        if k == 1 and stride == 1 and pad == 0:
            cols = np.moveaxis(x, 1, -1).reshape(-1, c)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
            win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
            win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(-1, c * k * k)
        self.cols = cols
        self.oshape = (n, ho, wo, o)
        out = cols @ w.reshape(o, -1).T
        if b is not None:
            out = out + b
        return np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))

    def backward(self, g):
        n, c, h, wd = self.xshape
        o = self.w.shape[0]
        k, s, p = self.k, self.stride, self.pad
        _, ho, wo, _ = self.oshape
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (gm.T @ self.cols).reshape(self.w.shape)
        gcols = gm @ self.w.reshape(o, -1)
        if k == 1 and s == 1 and p == 0:
            gx = np.moveaxis(gcols.reshape(n, h, wd, c), -1, 1)
        else:
            gcols = gcols.reshape(n, ho, wo, c, k, k)
            gxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, :, :, :, i, j].transpose(
                        0, 3, 1, 2
                    )
            gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
        grads = (np.ascontiguousarray(gx), gw)
        if self.has_bias:
            grads += (gm.sum(axis=0),)
        return grads


def conv2d(x, w, b=None, stride=1, pad=0):
    """2-D cross-correlation; accepts ``C×H×W`` or ``N×C×H×W`` input."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    args = (x, w) if b is None else (x, w, b)
    out = Conv2d.apply(*args, stride=stride, pad=pad)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


@functools.lru_cache(maxsize=64)
def interpolation_matrix(n, factor, dtype_str="float64"):
    """Linear interpolation weights (``factor*n × n``), align-corners=False."""
    m = np.zeros((n * factor, n), dtype=dtype_str)
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[i, i0] += 1.0 - lam
        m[i, i1] += lam
    m.setflags(write=False)
    return m


class BilinearUpsample(Function):
    name = "bilinear_upsample"

    def forward(self, x, factor=2):
        h, w = x.shape[-2:]
        self.ah = interpolation_matrix(h, factor, x.dtype.str)
        self.aw = interpolation_matrix(w, factor, x.dtype.str)
        return self.ah @ x @ self.aw.T

    def backward(self, g):
        return (self.ah.T @ g @ self.aw,)


def bilinear_upsample(x, factor):
    """Upsample the two trailing axes by an integer factor (align-corners=False)."""
    if not isinstance(factor, (int, np.integer)) or factor < 1:
        raise DomainError(f"upsample factor must be a positive integer, got {factor!r}")
    if factor == 1:
        return as_tensor(x)
    return BilinearUpsample.apply(x, factor=int(factor))
