"""Numba vs pure-numpy timings for the hot kernels, plus one training step.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is warmed up once per backend (so JIT compilation is excluded)
and the outputs of the two backends are checked for equality before timing.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from adlda import kernels
from adlda._accel import HAVE_NUMBA, backend
from adlda.augment import default_partition, label_and_augment
from adlda.model import ModelSpec, build_model
from adlda.trainer import SGD, train_step


def _cases(rng):
    x = rng.random((64, 16, 16, 16)).astype(np.float32)
    cols = kernels.im2col(x, 3, 3, 1, 1)
    pooled, arg = kernels.maxpool_forward(x, 2)
    img = rng.random((3, 32, 32)).astype(np.float32)
    grid = np.mgrid[0:32, 0:32].astype(np.float64)
    ys, xs = grid[0] * 0.97 + 0.4, grid[1] * 1.01 - 0.3
    return {
        "im2col 64x16x16x16 k3": lambda: kernels.im2col(x, 3, 3, 1, 1),
        "col2im 64x16x16x16 k3": lambda: kernels.col2im(cols, x.shape, 3, 3, 1, 1),
        "maxpool fwd 64x16x16x16": lambda: kernels.maxpool_forward(x, 2),
        "maxpool bwd 64x16x16x16": lambda: kernels.maxpool_backward(pooled, arg, x.shape, 2),
        "bilinear 3x32x32": lambda: kernels.bilinear_sample(img, ys, xs),
    }


def _train_step_case(rng):
    spec = ModelSpec(input_shape=(3, 32, 32), class_count=10)
    images = rng.random((64, 3, 32, 32)).astype(np.float32)
    labels = rng.integers(0, 10, size=64)
    batch = label_and_augment(images, labels, default_partition(), [0.2] * 5, (0,))
    model = build_model(spec, 0)
    opt = SGD(model.trainable_parameters(), 0.01, 0.9)
    return lambda: train_step(model, batch.images, batch.class_labels, batch.domain_labels, opt)


def _time(fn, repeat: int) -> float:
    fn()
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def _same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if not HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s}")
    for name, fn in _cases(rng).items():
        with backend(False):
            ref = fn()
            t_np = _time(fn, args.repeat)
        with backend(True):
            out = fn()
            t_nb = _time(fn, args.repeat)
        flag = "" if _same(ref, out) else "  MISMATCH"
        print(f"{name:28s} {t_np:10.3f} {t_nb:10.3f} {t_np / t_nb:7.2f}x{flag}")

    for use in (False, True):
        with backend(use):
            step = _train_step_case(np.random.default_rng(1))
            t = _time(step, max(3, args.repeat // 4))
        print(f"{'train_step bs64 3x32x32':28s} {'numba' if use else 'numpy':>10s} {t:10.3f} ms")


if __name__ == "__main__":
    main()
