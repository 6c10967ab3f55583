"""Dense tensors with a define-by-run reverse-mode tape.

Each differentiable operation is a :class:`Function` subclass. Subclasses
register themselves in :data:`OPS` under their ``name``; the gradient-check
suite uses that registry to prove every op is covered.

Broadcasting is limited to tensor-with-scalar. Anything else (bias over a
batch, for instance) goes through a dedicated op such as :func:`bias_add`.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from adlda import kernels

Scalar = Union[int, float]

_default_dtype = np.dtype(np.float32)
_grad_enabled = True

OPS: Dict[str, type] = {}


class ShapeError(ValueError):
    pass


def get_default_dtype() -> np.dtype:
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _default_dtype = dtype


@contextmanager
def precision(dtype):
    """Temporarily switch the default float dtype (``"float64"`` for oracles)."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


@contextmanager
def no_grad():
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """A float array plus the tape node that produced it (if any)."""

    def __init__(self, data, requires_grad: bool = False, dtype=None, _ctx: Optional["Function"] = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = np.dtype(dtype) if dtype is not None else _default_dtype
        arr = np.asarray(data, dtype=dtype)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def backward(self):
        return backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


class Function:
    """One tape node. ``forward`` works on arrays, ``backward`` returns one
    gradient (or ``None``) per input."""

    name: str = ""

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        if cls.name:
            OPS[cls.name] = cls

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = _grad_enabled and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, dtype=out.dtype, _ctx=fn if track else None)


def _check_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _cast(value: Scalar, dtype) -> np.ndarray:
    return np.asarray(value, dtype=dtype)


# --------------------------------------------------------------------------
# elementwise


class Add(Function):
    name = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, g):
        return g, g


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, g):
        return g, -g


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        return g * self.b, g * self.a


class Scale(Function):
    name = "scale"

    def forward(self, a, c):
        self.c = _cast(c, a.dtype)
        return a * self.c

    def backward(self, g):
        return (g * self.c,)


class Shift(Function):
    name = "shift"

    def forward(self, a, c):
        return a + _cast(c, a.dtype)

    def backward(self, g):
        return (g,)


class ReLU(Function):
    name = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.where(self.mask, a, np.zeros((), dtype=a.dtype))

    def backward(self, g):
        # subgradient at 0 is 0
        return (np.where(self.mask, g, np.zeros((), dtype=g.dtype)),)


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
        if np.any(a <= 0):
            raise ValueError("log of a non-positive value")
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


_BINARY = {"add": Add, "sub": Sub, "mul": Mul}
_UNARY = {"relu": ReLU, "exp": Exp, "log": Log}


def elementwise(kind: str, a, b=None) -> Tensor:
    """``kind`` in {add, sub, mul, scale, relu, exp, log}; ``b`` may be a scalar."""
    a = as_tensor(a)
    if kind in _UNARY:
        if b is not None:
            raise TypeError(f"{kind} takes a single operand")
        return _UNARY[kind].apply(a)
    if kind == "scale":
        return Scale.apply(a, c=float(b))
    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    if not isinstance(b, Tensor):
        if np.ndim(b) != 0:
            raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {np.shape(b)}; only scalars broadcast")
        b = float(b)
        if kind == "add":
            return Shift.apply(a, c=b)
        if kind == "sub":
            return Shift.apply(a, c=-b)
        return Scale.apply(a, c=b)
    if b.ndim == 0 and a.ndim != 0:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}; pass scalars as python numbers")
    _check_same_shape(a, b, kind)
    return _BINARY[kind].apply(a, b)


def add(a, b):
    return elementwise("add", a, b)


def sub(a, b):
    return elementwise("sub", a, b)


def mul(a, b):
    return elementwise("mul", a, b)


def scale(a, c: Scalar):
    return elementwise("scale", a, c)


def relu(a):
    return elementwise("relu", a)


def exp(a):
    return elementwise("exp", a)


def log(a):
    return elementwise("log", a)


# --------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        return g @ self.b.T, self.a.T @ g


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree {a.shape} vs {b.shape}")
    return MatMul.apply(a, b)


class BatchMatMul(Function):
    name = "bmm"

    def forward(self, a, b):
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, g):
        return np.matmul(g, np.swapaxes(self.b, -1, -2)), np.matmul(np.swapaxes(self.a, -1, -2), g)


def bmm(a, b) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} vs {b.shape}")
    return BatchMatMul.apply(a, b)


class BiasAdd(Function):
    name = "bias_add"

    def forward(self, x, b, axis):
        self.axis = axis % x.ndim
        self.view = [1] * x.ndim
        self.view[self.axis] = -1
        return x + b.reshape(self.view)

    def backward(self, g):
        axes = tuple(i for i in range(g.ndim) if i != self.axis)
        return g, g.sum(axis=axes)


def bias_add(x, b, axis: int = -1) -> Tensor:
    """Add a 1-D bias along ``axis`` of ``x``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError(f"bias_add: bias {b.shape} does not match axis {axis} of {x.shape}")
    return BiasAdd.apply(x, b, axis=axis)


# --------------------------------------------------------------------------
# convolution and pooling


class Conv2d(Function):
    name = "conv2d"

    def forward(self, x, w, stride, padding):
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        self.x_shape, self.w_shape = x.shape, w.shape
        self.stride, self.padding = stride, padding
        oh = kernels.conv_output_size(h, kh, stride, padding)
        ow = kernels.conv_output_size(wd, kw, stride, padding)
        self.cols = kernels.im2col(x, kh, kw, stride, padding)
        self.wmat = w.reshape(f, -1)
        out = self.cols @ self.wmat.T
        return np.ascontiguousarray(out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2))

    def backward(self, g):
        f, c, kh, kw = self.w_shape
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        dw = (gmat.T @ self.cols).reshape(self.w_shape)
        dcols = gmat @ self.wmat
        dx = kernels.col2im(dcols, self.x_shape, kh, kw, self.stride, self.padding)
        return dx, dw


def conv2d(x, kernel, stride: int = 1, padding: int = 0) -> Tensor:
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects N x C x H x W input and F x C x kh x kw kernel, got {x.shape}, {kernel.shape}")
    if x.shape[1] != kernel.shape[1]:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} vs kernel channels {kernel.shape[1]}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    kh, kw = kernel.shape[2:]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {x.shape[2:]} (padding {padding})")
    return Conv2d.apply(x, kernel, stride=stride, padding=padding)


class MaxPool2d(Function):
    name = "max_pool2d"

    def forward(self, x, k):
        self.x_shape, self.k = x.shape, k
        out, self.arg = kernels.maxpool_forward(x, k)
        return out

    def backward(self, g):
        return (kernels.maxpool_backward(g, self.arg, self.x_shape, self.k),)


def max_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] < k or x.shape[3] < k:
        raise ShapeError(f"max_pool2d: input {x.shape} too small for window {k}")
    return MaxPool2d.apply(x, k=k)


# --------------------------------------------------------------------------
# probabilities and losses


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


class Softmax(Function):
    name = "softmax"

    def forward(self, z, axis):
        self.axis = axis
        self.out = _softmax(z, axis)
        return self.out

    def backward(self, g):
        s = self.out
        return (s * (g - (g * s).sum(axis=self.axis, keepdims=True)),)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[axis] < 1:
        raise ShapeError(f"softmax needs at least one entry along axis {axis}, got {x.shape}")
    return Softmax.apply(x, axis=axis)


class CrossEntropy(Function):
    name = "cross_entropy"

    def forward(self, z, targets, weights):
        n = z.shape[0]
        m = z.max(axis=1, keepdims=True)
        shifted = z - m
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - lse
        self.p = np.exp(logp)
        self.targets = targets
        self.weights = weights.astype(z.dtype)
        picked = logp[np.arange(n), targets]
        return np.asarray(-(self.weights * picked).sum(), dtype=z.dtype)

    def backward(self, g):
        d = self.p.copy()
        d[np.arange(d.shape[0]), self.targets] -= 1
        return (d * (self.weights * g)[:, None],)


def cross_entropy(logits, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(logits).

    ``weights`` (length N, treated as constants) replaces the uniform 1/N
    averaging, so ``sum_i weights[i] * nll_i`` is returned instead.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,) or not np.issubdtype(targets.dtype, np.integer):
        raise ShapeError(f"cross_entropy: targets must be {n} integers, got {targets.shape} {targets.dtype}")
    if n and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"cross_entropy: target out of range [0, {c})")
    if weights is None:
        weights = np.full(n, 1.0 / n, dtype=np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n,):
            raise ShapeError(f"cross_entropy: weights shape {weights.shape} vs ({n},)")
    return CrossEntropy.apply(logits, targets=targets.astype(np.int64), weights=weights)


# --------------------------------------------------------------------------
# reductions and reshaping


class Sum(Function):
    name = "sum"

    def forward(self, x, axis):
        self.shape, self.axis = x.shape, axis
        return np.asarray(x.sum(axis=axis), dtype=x.dtype)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x, axis):
        self.shape, self.axis = x.shape, axis
        self.count = x.size if axis is None else x.shape[axis]
        return np.asarray(x.mean(axis=axis), dtype=x.dtype)

    def backward(self, g):
        if self.axis is not None:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g / g.dtype.type(self.count), self.shape).copy(),)


def tsum(x, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(as_tensor(x), axis=axis)


def mean(x, axis: Optional[int] = None) -> Tensor:
    return Mean.apply(as_tensor(x), axis=axis)


class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes):
        self.inverse = tuple(np.argsort(axes))
        return np.ascontiguousarray(x.transpose(axes))

    def backward(self, g):
        return (np.ascontiguousarray(g.transpose(self.inverse)),)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if -1 not in shape and math.prod(shape) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}")
    return Reshape.apply(x, shape=shape)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    return Transpose.apply(x, axes=axes)


# --------------------------------------------------------------------------
# gradient reversal


class GradientReversal(Function):
    name = "gradient_reversal"

    def forward(self, x, lam):
        self.neg_lam = _cast(-lam, x.dtype)
        return x

    def backward(self, g):
        return (g * self.neg_lam,)


def gradient_reversal(x, lam: float) -> Tensor:
    """Identity on the way forward; multiplies the incoming gradient by -lam."""
    lam = float(lam)
    if not math.isfinite(lam) or lam < 0:
        raise ValueError(f"gradient_reversal: lambda must be finite and >= 0, got {lam}")
    return GradientReversal.apply(as_tensor(x), lam=lam)


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor, accumulate: bool = True) -> Dict[Tensor, np.ndarray]:
    """Propagate d(root)/d(.) through the tape.

    Leaves accumulate into ``.grad`` (unless ``accumulate`` is false); the
    returned map holds this pass's gradient for every reachable
    ``requires_grad`` leaf.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones(root.shape, dtype=root.dtype)}
    result: Dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            result[node] = g
            if accumulate:
                node.grad = g if node.grad is None else node.grad + g
            continue
        parent_grads = node._ctx.backward(g)
        for parent, pg in zip(node._ctx.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise ShapeError(f"{node._ctx.name}: backward produced {pg.shape} for input {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return result
