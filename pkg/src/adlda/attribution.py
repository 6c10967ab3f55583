"""Grad-CAM over the last convolutional block and PPM overlays."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from adlda import tensor as T
from adlda.model import AdldaModel
from adlda.tensor import Tensor


@dataclass
class Heatmap:
    values: np.ndarray  # H x W in [0, 1], input resolution
    source_shape: Tuple[int, int]
    raw: np.ndarray  # unnormalised map at source resolution

    @property
    def upsampled_shape(self) -> Tuple[int, int]:
        return self.values.shape


def upsample_bilinear(m: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D array."""
    h, w = m.shape
    oh, ow = shape
    ys = np.linspace(0.0, h - 1, oh) if oh > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, ow) if ow > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = m[y0][:, x0] * (1 - wx) + m[y0][:, x1] * wx
    bottom = m[y1][:, x0] * (1 - wx) + m[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def grad_cam(model: AdldaModel, image: np.ndarray, target_class: int) -> Heatmap:
    """Gradient-weighted activation map for one C x H x W image."""
    if not 0 <= target_class < model.class_count:
        raise ValueError(f"target class {target_class} outside [0, {model.class_count})")
    image = np.asarray(image)
    capture: list = []
    with T.no_grad():
        model.forward_class(T.Tensor(image[None]), capture=capture)
    if not capture:
        raise ValueError("grad_cam needs a convolutional feature extractor")
    acts = capture[0]  # 1 x K x h x w, post-ReLU, pre-pool
    probe = Tensor(acts.data, requires_grad=True, dtype=acts.dtype)
    grads = _grad_wrt_activation(model, probe, target_class)
    weights = grads[0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, acts.data[0], axes=1).astype(np.float64), 0.0)
    peak = raw.max()
    norm = raw / peak if peak > 0 else np.zeros_like(raw)
    values = upsample_bilinear(norm, image.shape[1:])
    values = np.clip(values, 0.0, 1.0)
    return Heatmap(values=values, source_shape=raw.shape, raw=raw)


def _grad_wrt_activation(model: AdldaModel, probe: Tensor, target_class: int) -> np.ndarray:
    """d(class logit)/d(last pre-pool activation), replaying the remaining class path."""
    x = T.max_pool2d(probe, 2)
    logits = model.label_head(x)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[0, target_class] = 1
    score = T.tsum(T.mul(logits, Tensor(onehot, dtype=logits.dtype)))
    grads = T.backward(score, accumulate=False)
    return grads.get(probe, np.zeros(probe.shape, dtype=probe.dtype))


def box_mass_fraction(heatmap: Heatmap, box: Tuple[int, int, int, int]) -> float:
    """Share of heatmap mass inside (top, left, height, width); 0 for an empty map."""
    top, left, h, w = box
    total = heatmap.values.sum()
    if total <= 0:
        return 0.0
    return float(heatmap.values[top : top + h, left : left + w].sum() / total)


def to_grayscale(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] == 1:
        return image[0]
    if image.shape[0] == 3:
        return 0.299 * image[0] + 0.587 * image[1] + 0.114 * image[2]
    return image.mean(axis=0)


def heatmap_to_ppm(heatmap: Heatmap, base_image: np.ndarray, alpha: float) -> bytes:
    """Binary PPM: (1 - alpha) * grey base + alpha * (heat, 0, 0)."""
    if not 0 <= alpha <= 1:
        raise ValueError("alpha must be in [0, 1]")
    gray = to_grayscale(base_image)
    if gray.shape != heatmap.values.shape:
        raise ValueError(f"heatmap {heatmap.values.shape} does not match image {gray.shape}")
    red = (1 - alpha) * gray + alpha * heatmap.values
    other = (1 - alpha) * gray
    rgb = np.stack([red, other, other], axis=-1)
    pixels = np.rint(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()
