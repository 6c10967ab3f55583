"""Augmentation families and the domain-labelling pipeline.

Each family produces one sub-domain; the domain label of an augmented image
is the id of the family that produced it. Family 0 is always the identity,
so clean images form their own domain.

Randomness is keyed, never global: a sample's generator is derived from
``(*key, sample_index)``, which makes the output independent of batching
or of the order in which samples are processed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence

import numpy as np

from adlda import kernels

KINDS = ("identity", "geometric", "color", "noise", "cutout")

DEFAULT_PARAMS: Dict[str, Dict[str, float]] = {
    "identity": {},
    "geometric": {"max_degrees": 15.0, "flip_prob": 0.5},
    "color": {"brightness": 0.2, "contrast": 0.2},
    "noise": {"sigma": 0.05},
    "cutout": {"fraction": 0.25, "fill": 0.5},
}


@dataclass(frozen=True)
class AugFamily:
    id: int
    kind: str
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        merged = dict(DEFAULT_PARAMS[self.kind])
        unknown = set(self.params) - set(merged)
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged.update({k: float(v) for k, v in self.params.items()})
        object.__setattr__(self, "params", merged)
        p = merged
        if self.kind == "geometric" and not (0 <= p["max_degrees"] <= 180 and 0 <= p["flip_prob"] <= 1):
            raise ValueError(f"geometric parameters out of range: {p}")
        if self.kind == "color" and not (0 <= p["brightness"] <= 1 and 0 <= p["contrast"] < 1):
            raise ValueError(f"color parameters out of range: {p}")
        if self.kind == "noise" and not p["sigma"] >= 0:
            raise ValueError(f"noise sigma must be >= 0, got {p['sigma']}")
        if self.kind == "cutout" and not (0 < p["fraction"] < 1 and 0 <= p["fill"] <= 1):
            raise ValueError(f"cutout parameters out of range: {p}")


def default_partition() -> List[AugFamily]:
    return [AugFamily(i, kind) for i, kind in enumerate(KINDS)]


def validate_partition(partition: Sequence[AugFamily]) -> None:
    if len(partition) < 2:
        raise ValueError("a partition needs at least one non-identity family (K >= 2)")
    for i, fam in enumerate(partition):
        if fam.id != i:
            raise ValueError(f"family at position {i} has id {fam.id}; ids must be 0..K-1 in order")
    if partition[0].kind != "identity":
        raise ValueError("family 0 must be the identity")


def validate_probabilities(probabilities, k: int) -> np.ndarray:
    p = np.asarray(probabilities, dtype=np.float64)
    if p.shape != (k,):
        raise ValueError(f"need {k} domain probabilities, got shape {p.shape}")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"domain probabilities must be non-negative and sum to 1, got {p.tolist()}")
    return p


# --------------------------------------------------------------------------
# transforms on a single C x H x W image in [0, 1]


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the centre; bilinear, zero fill."""
    if not math.isfinite(degrees):
        raise ValueError("rotation angle must be finite")
    _, h, w = image.shape
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64) - cy, np.arange(w, dtype=np.float64) - cx, indexing="ij")
    src_x = cols * cos - rows * sin + cx
    src_y = cols * sin + rows * cos + cy
    return np.clip(kernels.bilinear_sample(image, src_y, src_x), 0.0, 1.0)


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1].copy()


def color_jitter(image: np.ndarray, contrast: float, brightness: float) -> np.ndarray:
    """clamp(contrast * x + brightness)."""
    if contrast < 0:
        raise ValueError("contrast factor must be >= 0")
    dtype = image.dtype
    return np.clip(image * dtype.type(contrast) + dtype.type(brightness), 0.0, 1.0)


def gaussian_noise(image: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    if sigma == 0:
        return image.copy()
    noise = rng.normal(0.0, sigma, size=image.shape).astype(image.dtype)
    return np.clip(image + noise, 0.0, 1.0)


def cutout_side(fraction: float, h: int, w: int) -> int:
    return max(1, min(h, w, int(round(math.sqrt(fraction * h * w)))))


def cutout(image: np.ndarray, fraction: float, rng: np.random.Generator, fill: float = 0.5) -> np.ndarray:
    """Fill one square of area ``fraction`` (rounded) lying fully inside the frame."""
    if not 0 < fraction < 1:
        raise ValueError("cutout fraction must be in (0, 1)")
    _, h, w = image.shape
    side = cutout_side(fraction, h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = image.copy()
    out[:, top : top + side, left : left + side] = fill
    return out


def apply_family(family: AugFamily, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Apply one family; parameters are drawn from ``rng``."""
    image = np.asarray(image)
    p = family.params
    if family.kind == "identity":
        return image.copy()
    if family.kind == "geometric":
        degrees = rng.uniform(-p["max_degrees"], p["max_degrees"])
        flip = rng.random() < p["flip_prob"]
        out = rotate(image, degrees)
        return hflip(out) if flip else out
    if family.kind == "color":
        contrast = rng.uniform(1.0 - p["contrast"], 1.0 + p["contrast"])
        brightness = rng.uniform(-p["brightness"], p["brightness"])
        return color_jitter(image, contrast, brightness)
    if family.kind == "noise":
        return gaussian_noise(image, p["sigma"], rng)
    if family.kind == "cutout":
        return cutout(image, p["fraction"], rng, fill=p["fill"])
    raise ValueError(f"unknown augmentation kind {family.kind!r}")


# --------------------------------------------------------------------------
# domain-labelled batches


@dataclass(frozen=True)
class DomainLabeledSample:
    image: np.ndarray
    class_label: int
    domain_label: int


@dataclass
class DomainLabeledBatch:
    images: np.ndarray
    class_labels: np.ndarray
    domain_labels: np.ndarray

    def __len__(self) -> int:
        return len(self.class_labels)

    def __getitem__(self, i: int) -> DomainLabeledSample:
        return DomainLabeledSample(self.images[i], int(self.class_labels[i]), int(self.domain_labels[i]))

    def __iter__(self) -> Iterator[DomainLabeledSample]:
        return (self[i] for i in range(len(self)))


def sample_rng(key: Sequence[int], index: int, variant: Optional[int] = None) -> np.random.Generator:
    entropy = [int(k) for k in key] + [int(index)]
    if variant is not None:
        entropy.append(int(variant))
    return np.random.default_rng(entropy)


def label_and_augment(
    images: np.ndarray,
    labels: np.ndarray,
    partition: Sequence[AugFamily],
    probabilities,
    key: Sequence[int],
    indices: Optional[Sequence[int]] = None,
    all_variants: bool = False,
) -> DomainLabeledBatch:
    """Assign every image a family d ~ probabilities and augment it with it.

    ``indices`` are the dataset indices of the images (default 0..n-1); they
    select the per-sample random streams. With ``all_variants`` every image
    is emitted once per family instead (probabilities are then only checked).
    """
    validate_partition(partition)
    k = len(partition)
    p = validate_probabilities(probabilities, k)
    images = np.asarray(images)
    labels = np.asarray(labels)
    n = len(labels)
    if images.shape[0] != n:
        raise ValueError(f"{images.shape[0]} images but {n} labels")
    if indices is None:
        indices = np.arange(n)
    cdf = np.cumsum(p)
    out_images, out_y, out_d = [], [], []
    for img, y, idx in zip(images, labels, indices):
        if all_variants:
            for d, fam in enumerate(partition):
                out_images.append(apply_family(fam, img, sample_rng(key, idx, d)))
                out_y.append(y)
                out_d.append(d)
            continue
        rng = sample_rng(key, idx)
        d = min(int(np.searchsorted(cdf, rng.random(), side="right")), k - 1)
        # guard against cdf round-off landing on a zero-probability family
        while p[d] == 0:
            d -= 1
        out_images.append(apply_family(partition[d], img, rng))
        out_y.append(y)
        out_d.append(d)
    shape = (0,) + images.shape[1:]
    return DomainLabeledBatch(
        images=np.stack(out_images).astype(images.dtype, copy=False) if out_images else np.zeros(shape, images.dtype),
        class_labels=np.asarray(out_y, dtype=np.int64),
        domain_labels=np.asarray(out_d, dtype=np.int64),
    )
