"""Central finite-difference checks for tape gradients.

The finite differences are always evaluated in float64, whatever the
precision of the tape under test, so a float32 check measures the float32
gradient against a high-precision reference rather than against float32
cancellation noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from adlda import tensor as T
from adlda.tensor import Tensor


@dataclass
class GradCheckReport:
    name: str
    errors: List[float] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        return max(self.errors) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return all(np.isfinite(self.errors)) and self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest magnitude in either array."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / denom)


def numeric_gradient(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, epsilon: float) -> np.ndarray:
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    with T.precision(np.float64), T.no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(f(*[Tensor(a) for a in base]).data)
            flat[i] = orig - epsilon
            lo = float(f(*[Tensor(a) for a in base]).data)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * epsilon)
    return grad


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    epsilon: float = 1e-6,
    tolerance: float = 1e-4,
    dtype=np.float64,
    name: str = "",
    numeric_scale: float = 1.0,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``dtype`` is the precision of the tape pass; one error is recorded per
    input. ``numeric_scale`` multiplies the finite-difference reference, for
    ops whose backward is deliberately not the derivative of their forward
    (gradient reversal: -lambda).
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    with T.precision(dtype):
        leaves = [Tensor(np.asarray(a), requires_grad=True) for a in inputs]
        out = f(*leaves)
        grads = T.backward(out)
    report = GradCheckReport(name=name, tolerance=tolerance)
    arrays = [leaf.data for leaf in leaves]
    for i, leaf in enumerate(leaves):
        analytic = grads.get(leaf, np.zeros(leaf.shape))
        numeric = numeric_scale * numeric_gradient(f, arrays, i, epsilon)
        report.errors.append(relative_error(analytic, numeric))
    return report


# --------------------------------------------------------------------------
# per-op suite: one case per registered differentiable op


def _weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    return T.tsum(T.mul(y, Tensor(weights, dtype=y.dtype)))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng, shape, spacing=0.05):
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing + rng.uniform(0, spacing / 4, n) - n * spacing / 2).reshape(shape)


# (f, inputs) or (f, inputs, numeric_scale)
Case = Tuple


def _case_add(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted_sum(T.add(a, b), w)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def _case_sub(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a, b: _weighted_sum(T.sub(a, b), w)), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def _case_mul(rng):
    return (lambda a, b: T.tsum(T.mul(a, b))), [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))]


def _case_scale(rng):
    w, c = rng.normal(size=(5,)), rng.normal()
    return (lambda a: _weighted_sum(T.scale(a, c), w)), [rng.normal(size=(5,))]


def _case_shift(rng):
    w, c = rng.normal(size=(5,)), rng.normal()
    return (lambda a: _weighted_sum(T.add(a, c), w)), [rng.normal(size=(5,))]


def _case_relu(rng):
    w = rng.normal(size=(4, 5))
    return (lambda a: _weighted_sum(T.relu(a), w)), [_away_from_zero(rng, (4, 5))]


def _case_exp(rng):
    w = rng.normal(size=(6,))
    return (lambda a: _weighted_sum(T.exp(a), w)), [rng.normal(size=(6,))]


def _case_log(rng):
    w = rng.normal(size=(6,))
    return (lambda a: _weighted_sum(T.log(a), w)), [rng.uniform(0.5, 2.0, size=(6,))]


def _case_matmul(rng):
    w = rng.normal(size=(3, 2))
    return (lambda a, b: _weighted_sum(T.matmul(a, b), w)), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]


def _case_bmm(rng):
    w = rng.normal(size=(2, 2, 3, 2))
    return (lambda a, b: _weighted_sum(T.bmm(a, b), w)), [rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 4, 2))]


def _case_bias_add(rng):
    w = rng.normal(size=(2, 3, 4))
    return (lambda x, b: _weighted_sum(T.bias_add(x, b, axis=1), w)), [rng.normal(size=(2, 3, 4)), rng.normal(size=(3,))]


def _case_conv2d(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 3, 5, 5))
    k = rng.normal(size=(2, 3, 3, 3)) * 0.5
    oh = (5 + 2 * pad - 3) // stride + 1
    w = rng.normal(size=(2, 2, oh, oh))
    return (lambda a, b: _weighted_sum(T.conv2d(a, b, stride=stride, padding=pad), w)), [x, k]


def _case_max_pool2d(rng):
    w = rng.normal(size=(2, 2, 2, 2))
    return (lambda a: _weighted_sum(T.max_pool2d(a, 2), w)), [_distinct(rng, (2, 2, 4, 5))]


def _case_softmax(rng):
    w = rng.normal(size=(3, 4))
    return (lambda a: _weighted_sum(T.softmax(a, axis=-1), w)), [rng.normal(size=(3, 4))]


def _case_cross_entropy(rng):
    targets = rng.integers(0, 5, size=4)
    weights = rng.uniform(0.1, 1.0, size=4)
    return (lambda a: T.cross_entropy(a, targets, weights=weights)), [rng.normal(size=(4, 5)) * 2]


def _case_sum(rng):
    w = rng.normal(size=(3,))
    return (lambda a: _weighted_sum(T.tsum(a, axis=1), w)), [rng.normal(size=(3, 4))]


def _case_mean(rng):
    w = rng.normal(size=(2, 4))
    return (lambda a: _weighted_sum(T.mean(a, axis=1), w)), [rng.normal(size=(2, 3, 4))]


def _case_reshape(rng):
    w = rng.normal(size=(6, 2))
    return (lambda a: _weighted_sum(T.reshape(a, (6, 2)), w)), [rng.normal(size=(3, 4))]


def _case_transpose(rng):
    w = rng.normal(size=(4, 2, 3))
    return (lambda a: _weighted_sum(T.transpose(a, (2, 0, 1)), w)), [rng.normal(size=(2, 3, 4))]


def _case_gradient_reversal(rng):
    w, lam = rng.normal(size=(5,)), float(rng.uniform(0, 2))
    return (lambda a: _weighted_sum(T.gradient_reversal(a, lam), w)), [rng.normal(size=(5,))], -lam


OP_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "shift": _case_shift,
    "relu": _case_relu,
    "exp": _case_exp,
    "log": _case_log,
    "matmul": _case_matmul,
    "bmm": _case_bmm,
    "bias_add": _case_bias_add,
    "conv2d": _case_conv2d,
    "max_pool2d": _case_max_pool2d,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "sum": _case_sum,
    "mean": _case_mean,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "gradient_reversal": _case_gradient_reversal,
}

TOLERANCE = {np.dtype(np.float32): 1e-4, np.dtype(np.float64): 1e-7}


def check_op(name: str, dtype=np.float64, points: int = 10, seed: int = 0) -> GradCheckReport:
    """Run one op's case at ``points`` random draws; keep the worst error."""
    dtype = np.dtype(dtype)
    build = OP_CASES[name]
    rng = np.random.default_rng([seed, sorted(T.OPS).index(name), dtype.itemsize])
    report = GradCheckReport(name=f"{name}[{dtype.name}]", tolerance=TOLERANCE[dtype])
    for _ in range(points):
        f, inputs, *rest = build(rng)
        inputs = [np.asarray(a, dtype=dtype) for a in inputs]
        numeric_scale = rest[0] if rest else 1.0
        sub = grad_check(f, inputs, epsilon=1e-6, tolerance=report.tolerance, dtype=dtype, numeric_scale=numeric_scale)
        report.errors.append(sub.max_rel_error)
    return report


def run_op_suite(points: int = 10, seed: int = 0) -> List[GradCheckReport]:
    """Check every op in the registry at both precisions.

    A registered op without a case yields a failing report rather than being
    skipped.
    """
    reports = []
    for name in sorted(T.OPS):
        if name not in OP_CASES:
            reports.append(GradCheckReport(name=f"{name}[no case]", errors=[float("inf")]))
            continue
        for dtype in (np.float64, np.float32):
            reports.append(check_op(name, dtype, points=points, seed=seed))
    return reports


# --------------------------------------------------------------------------
# layer suite: whole modules, checked with respect to input and parameters


def _module_case(module, x: np.ndarray, forward: Callable[[object, Tensor], Tensor], skip: Sequence[str] = ()):
    params = [(n, p) for n, p in module.named_parameters() if n not in skip]
    names = [n for n, _ in params]
    arrays = [p.data.astype(np.float64) for _, p in params]

    def f(inp, *params):
        module.bind(dict(zip(names, params)))
        return forward(module, inp)

    return f, [x, *arrays]


def _layer_linear(rng):
    from adlda.nn import Linear

    layer = Linear(4, 3, rng)
    layer.bias.data = rng.normal(size=3)
    w = rng.normal(size=(5, 3))
    return _module_case(layer, rng.normal(size=(5, 4)), lambda m, x: _weighted_sum(m(x), w))


def _layer_attention(rng):
    from adlda.nn import MultiHeadSelfAttention

    layer = MultiHeadSelfAttention(4, 2, rng)
    w = rng.normal(size=(2, 3, 4))
    wa = rng.normal(size=(2, 2, 3, 3))

    def forward(m, x):
        out, attn = m(x)
        return T.add(_weighted_sum(out, w), _weighted_sum(attn, wa))

    # the key bias shifts every score in a row equally, so softmax makes its
    # gradient exactly zero and a relative error against FD noise is meaningless
    return _module_case(layer, rng.normal(size=(2, 3, 4)), forward, skip=("key.bias",))


def _layer_conv_block(rng):
    from adlda.nn import ConvBlock

    layer = ConvBlock(2, 3, rng)
    layer.bias.data = rng.normal(size=3) * 0.1
    w = rng.normal(size=(2, 3, 2, 2))
    return _module_case(layer, _distinct(rng, (2, 2, 4, 4), spacing=0.03), lambda m, x: _weighted_sum(m(x), w))


LAYER_CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "linear": _layer_linear,
    "self_attention": _layer_attention,
    "conv_block": _layer_conv_block,
}


def check_layer(name: str, dtype=np.float64, points: int = 3, seed: int = 0) -> GradCheckReport:
    dtype = np.dtype(dtype)
    rng = np.random.default_rng([seed, sorted(LAYER_CASES).index(name), dtype.itemsize, 7])
    report = GradCheckReport(name=f"layer:{name}[{dtype.name}]", tolerance=TOLERANCE[dtype])
    for _ in range(points):
        f, inputs = LAYER_CASES[name](rng)
        inputs = [np.asarray(a, dtype=dtype) for a in inputs]
        report.errors.append(grad_check(f, inputs, tolerance=report.tolerance, dtype=dtype).max_rel_error)
    return report


def run_layer_suite(points: int = 3, seed: int = 0) -> List[GradCheckReport]:
    return [check_layer(n, dt, points, seed) for n in sorted(LAYER_CASES) for dt in (np.float64, np.float32)]
