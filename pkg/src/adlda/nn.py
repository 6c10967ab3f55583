"""Layers used to assemble the feature extractor and the two heads."""

from __future__ import annotations

import math
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from adlda import tensor as T
from adlda.tensor import ShapeError, Tensor


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Parameter container. Subclasses list their children in ``_children``
    and their own tensors in ``_params``; names are dotted paths."""

    def __init__(self):
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Module"] = {}

    def add_param(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(value, requires_grad=trainable)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        if name in self._children:
            raise ValueError(f"duplicate child {name!r}")
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def bind(self, tensors: Dict[str, Tensor]) -> None:
        """Replace parameters by name (dotted paths, as in ``named_parameters``)."""
        for name, t in tensors.items():
            owner, _, leaf = name.rpartition(".")
            module = self
            for part in owner.split(".") if owner else []:
                module = module._children[part]
            if leaf not in module._params:
                raise KeyError(f"no parameter {name!r}")
            if module._params[leaf].shape != t.shape:
                raise ShapeError(f"{name}: shape {t.shape} vs {module._params[leaf].shape}")
            module._params[leaf] = t

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> List[Tensor]:
        return [p for p in self.parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """y = x W + b with W stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_features, self.out_features = in_features, out_features
        self.add_param("weight", kaiming_uniform(rng, (in_features, out_features), in_features))
        if bias:
            self.add_param("bias", np.zeros(out_features))

    @property
    def weight(self) -> Tensor:
        return self._params["weight"]

    @property
    def bias(self) -> Optional[Tensor]:
        return self._params.get("bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear: expected N x {self.in_features} input, got {x.shape}")
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.bias_add(y, self.bias, axis=-1)
        return y


class MLP(Module):
    """Linear layers with ReLU between them (none after the last)."""

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, bias: bool = True, final_relu: bool = False):
        super().__init__()
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.final_relu = final_relu
        self.layers = [
            self.add_child(str(i), Linear(sizes[i], sizes[i + 1], rng, bias=bias)) for i in range(len(sizes) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x


class ConvBlock(Module):
    """conv2d -> relu -> 2x2 max-pool."""

    def __init__(self, in_channels: int, filters: int, rng: np.random.Generator, kernel_size: int = 3,
                 padding: int = 1, stride: int = 1, bias: bool = True):
        super().__init__()
        self.in_channels, self.filters = in_channels, filters
        self.stride, self.padding = stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.add_param("kernel", kaiming_uniform(rng, (filters, in_channels, kernel_size, kernel_size), fan_in))
        if bias:
            self.add_param("bias", np.zeros(filters))

    @property
    def kernel(self) -> Tensor:
        return self._params["kernel"]

    @property
    def bias(self) -> Optional[Tensor]:
        return self._params.get("bias")

    def __call__(self, x: Tensor, capture: Optional[list] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv_block: expected N x {self.in_channels} x H x W input, got {x.shape}")
        y = T.conv2d(x, self.kernel, stride=self.stride, padding=self.padding)
        if self.bias is not None:
            y = T.bias_add(y, self.bias, axis=1)
        y = T.relu(y)
        if capture is not None:
            capture.append(y)
        return T.max_pool2d(y, 2)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over N x T x D tokens."""

    def __init__(self, width: int, num_heads: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        if num_heads < 1 or width % num_heads:
            raise ValueError(f"width {width} is not divisible by {num_heads} heads")
        self.width, self.num_heads = width, num_heads
        self.head_dim = width // num_heads
        self.query = self.add_child("query", Linear(width, width, rng, bias=bias))
        self.key = self.add_child("key", Linear(width, width, rng, bias=bias))
        self.value = self.add_child("value", Linear(width, width, rng, bias=bias))
        self.output = self.add_child("output", Linear(width, width, rng, bias=bias))

    def _split(self, x: Tensor, n: int, t: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, t, self.num_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        """Return (transformed tokens, attention maps N x heads x T x T)."""
        if tokens.ndim != 3 or tokens.shape[2] != self.width or tokens.shape[1] < 1:
            raise ShapeError(f"self_attention: expected N x T x {self.width} tokens, got {tokens.shape}")
        n, t, _ = tokens.shape
        flat = T.reshape(tokens, (n * t, self.width))
        q = self._split(self.query(flat), n, t)
        k = self._split(self.key(flat), n, t)
        v = self._split(self.value(flat), n, t)
        scores = T.scale(T.bmm(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(self.head_dim))
        attn = T.softmax(scores, axis=-1)
        mixed = T.transpose(T.bmm(attn, v), (0, 2, 1, 3))
        out = self.output(T.reshape(mixed, (n * t, self.width)))
        return T.reshape(out, (n, t, self.width)), attn


class GradientReversal(Module):
    """Identity forward, -lambda times the gradient backward."""

    def __init__(self, lam: float = 1.0):
        super().__init__()
        self.lam = lam

    @property
    def lam(self) -> float:
        return self._lam

    @lam.setter
    def lam(self, value: float) -> None:
        value = float(value)
        if not math.isfinite(value) or value < 0:
            raise ValueError(f"gradient reversal lambda must be finite and >= 0, got {value}")
        self._lam = value

    def __call__(self, x: Tensor) -> Tensor:
        return T.gradient_reversal(x, self._lam)
