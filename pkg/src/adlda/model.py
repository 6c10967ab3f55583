"""The two-path network: a shared feature extractor, a label head, and a
domain head that sits behind a gradient-reversal layer.

Forward paths::

    class logits  = label_head(extractor(x))
    domain logits = domain_head(attention(grl(tokens(extractor(x)))))

The class path never touches the domain head, so inference cost and
outputs are unaffected by it.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adlda import tensor as T
from adlda.nn import MLP, ConvBlock, GradientReversal, Linear, Module, MultiHeadSelfAttention
from adlda.tensor import ShapeError, Tensor

WEIGHTINGS = ("uniform", "attention")

# Named RNG streams. The domain head draws from its own stream so that its
# presence or size cannot perturb anything else.
STREAMS = {
    "init:feature": 1,
    "init:label_head": 2,
    "init:domain_head": 3,
    "shuffle": 4,
    "augment": 5,
    "eval_augment": 6,
}


def stream_rng(seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[stream]])


def stream_seed(seed: int, stream: str) -> int:
    return int(np.random.SeedSequence([int(seed), STREAMS[stream]]).generate_state(1)[0])


@dataclass
class ModelSpec:
    input_shape: Tuple[int, int, int]
    class_count: int
    domain_count: int = 5
    extractor: str = "conv"  # conv | mlp
    conv_filters: Tuple[int, ...] = (16, 32)
    mlp_hidden: Tuple[int, ...] = (32,)
    tokens: int = 4  # mlp only: features are split into this many tokens
    attn_heads: int = 2
    domain_hidden: Tuple[int, ...] = (64,)
    domain_head: bool = True
    weighting: str = "uniform"
    bias: bool = True

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.conv_filters = tuple(int(v) for v in self.conv_filters)
        self.mlp_hidden = tuple(int(v) for v in self.mlp_hidden)
        self.domain_hidden = tuple(int(v) for v in self.domain_hidden)
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.class_count < 1:
            raise ValueError("class_count must be >= 1")
        if self.domain_count < 2:
            raise ValueError("domain_count must be >= 2")
        if self.extractor not in ("conv", "mlp"):
            raise ValueError(f"extractor must be conv or mlp, got {self.extractor!r}")
        if self.extractor == "conv" and not self.conv_filters:
            raise ValueError("a conv extractor needs at least one block")
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


class ConvExtractor(Module):
    def __init__(self, in_channels: int, filters: Sequence[int], rng, bias: bool = True):
        super().__init__()
        self.blocks = []
        c = in_channels
        for i, f in enumerate(filters):
            self.blocks.append(self.add_child(f"block{i}", ConvBlock(c, f, rng, bias=bias)))
            c = f

    def __call__(self, x: Tensor, capture: Optional[list] = None) -> Tensor:
        for i, block in enumerate(self.blocks):
            x = block(x, capture if i == len(self.blocks) - 1 else None)
        return x


class MLPExtractor(Module):
    def __init__(self, in_features: int, hidden: Sequence[int], rng, bias: bool = True):
        super().__init__()
        self.mlp = self.add_child("mlp", MLP([in_features, *hidden], rng, bias=bias, final_relu=True)) if hidden else None

    def __call__(self, x: Tensor, capture: Optional[list] = None) -> Tensor:
        x = T.reshape(x, (x.shape[0], -1))
        return self.mlp(x) if self.mlp is not None else x


class LabelHead(Module):
    def __init__(self, in_features: int, class_count: int, rng, bias: bool = True):
        super().__init__()
        self.linear = self.add_child("linear", Linear(in_features, class_count, rng, bias=bias))

    def __call__(self, features: Tensor) -> Tensor:
        return self.linear(T.reshape(features, (features.shape[0], -1)))


class DomainHead(Module):
    """GRL -> multi-head self-attention -> mean over tokens -> MLP."""

    def __init__(self, width: int, heads: int, hidden: Sequence[int], domain_count: int, rng, bias: bool = True):
        super().__init__()
        self.grl = GradientReversal(1.0)
        self.attention = self.add_child("attention", MultiHeadSelfAttention(width, heads, rng, bias=bias))
        self.mlp = self.add_child("mlp", MLP([width, *hidden, domain_count], rng, bias=bias))

    def __call__(self, tokens: Tensor) -> Tuple[Tensor, Tensor]:
        mixed, attn = self.attention(self.grl(tokens))
        return self.mlp(T.mean(mixed, axis=1)), attn


@dataclass
class ForwardOutputs:
    class_logits: Tensor
    domain_logits: Optional[Tensor]
    domain_weights: np.ndarray
    features: Tensor
    attention: Optional[Tensor] = None


def attention_scores(attn: np.ndarray) -> np.ndarray:
    """Per-sample concentration of attention: mean over heads and queries of
    the largest key weight. Lies in [1/T, 1]."""
    return attn.max(axis=-1).mean(axis=(1, 2))


def domain_weights(mode: str, domain_labels: Optional[np.ndarray], k: int, attn: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-domain loss coefficients a; non-negative and summing to K.

    ``attention`` mode: a_d = K * softmax over the domains present in the
    batch of the mean attention score of their samples; absent domains get 0.
    The result is a constant, so no gradient flows into it.
    """
    if mode == "uniform" or domain_labels is None or attn is None:
        return np.ones(k)
    if mode != "attention":
        raise ValueError(f"unknown weighting {mode!r}")
    scores = attention_scores(np.asarray(attn, dtype=np.float64))
    present = np.array([np.any(domain_labels == d) for d in range(k)])
    s = np.array([scores[domain_labels == d].mean() if present[d] else 0.0 for d in range(k)])
    e = np.where(present, np.exp(s - s[present].max()), 0.0)
    return k * e / e.sum()


class AdldaModel(Module):
    def __init__(self, extractor: Module, label_head: Module, domain_head: Optional[DomainHead], class_count: int,
                 domain_count: int, weighting: str = "uniform", tokens: int = 1, spec: Optional[ModelSpec] = None):
        super().__init__()
        self.extractor = self.add_child("feature", extractor)
        self.label_head = self.add_child("label_head", label_head)
        self.domain_head = self.add_child("domain_head", domain_head) if domain_head is not None else None
        self.class_count, self.domain_count = class_count, domain_count
        self.weighting = weighting
        self.tokens = tokens
        self.spec = spec

    # -- parameter groups -------------------------------------------------
    def group(self, name: str) -> List[Tuple[str, Tensor]]:
        prefix = {"feature": "feature.", "label": "label_head.", "domain": "domain_head."}[name]
        return [(n, p) for n, p in self.named_parameters() if n.startswith(prefix)]

    @property
    def grl_lambda(self) -> float:
        return self.domain_head.grl.lam if self.domain_head is not None else 0.0

    def set_lambda(self, lam: float) -> None:
        if self.domain_head is not None:
            self.domain_head.grl.lam = lam

    # -- forward paths ----------------------------------------------------
    def _check_input(self, images) -> Tensor:
        x = T.as_tensor(images)
        if self.spec is not None and tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"model expects inputs N x {self.spec.input_shape}, got {x.shape}")
        return x

    def tokenize(self, features: Tensor) -> Tensor:
        n = features.shape[0]
        if features.ndim == 4:
            c, h, w = features.shape[1:]
            return T.transpose(T.reshape(features, (n, c, h * w)), (0, 2, 1))
        width = features.shape[1] // self.tokens
        return T.reshape(features, (n, self.tokens, width))

    def features(self, images, capture: Optional[list] = None) -> Tensor:
        return self.extractor(self._check_input(images), capture)

    def forward_class(self, images, capture: Optional[list] = None) -> Tensor:
        return self.label_head(self.features(images, capture))

    def _domain_from_features(self, feats: Tensor, domain_labels) -> Tuple[Tensor, np.ndarray, Tensor]:
        if self.domain_head is None:
            raise RuntimeError("model has no domain head")
        logits, attn = self.domain_head(self.tokenize(feats))
        weights = domain_weights(self.weighting, domain_labels, self.domain_count, attn.data)
        return logits, weights, attn

    def forward_domain(self, images, domain_labels=None) -> Tuple[Tensor, np.ndarray]:
        logits, weights, _ = self._domain_from_features(self.features(images), domain_labels)
        return logits, weights

    def forward(self, images, domain_labels=None) -> ForwardOutputs:
        """Both paths from a single feature computation."""
        feats = self.features(images)
        class_logits = self.label_head(feats)
        if self.domain_head is None:
            return ForwardOutputs(class_logits, None, np.ones(self.domain_count), feats)
        dlogits, weights, attn = self._domain_from_features(feats, domain_labels)
        return ForwardOutputs(class_logits, dlogits, weights, feats, attn)


def build_model(spec: ModelSpec, seed: int, domain_seed: Optional[int] = None) -> AdldaModel:
    """Build from ``spec``; ``domain_seed`` (default ``seed``) seeds only the domain head."""
    c, h, w = spec.input_shape
    frng = stream_rng(seed, "init:feature")
    if spec.extractor == "conv":
        extractor = ConvExtractor(c, spec.conv_filters, frng, bias=spec.bias)
        side_h, side_w = h, w
        for _ in spec.conv_filters:
            side_h, side_w = side_h // 2, side_w // 2
        if side_h < 1 or side_w < 1:
            raise ValueError(f"input {spec.input_shape} too small for {len(spec.conv_filters)} pooling stages")
        width = spec.conv_filters[-1]
        flat = width * side_h * side_w
        tokens = side_h * side_w
    else:
        extractor = MLPExtractor(c * h * w, spec.mlp_hidden, frng, bias=spec.bias)
        flat = spec.mlp_hidden[-1] if spec.mlp_hidden else c * h * w
        if flat % spec.tokens:
            raise ValueError(f"feature width {flat} is not divisible into {spec.tokens} tokens")
        width = flat // spec.tokens
        tokens = spec.tokens
    label_head = LabelHead(flat, spec.class_count, stream_rng(seed, "init:label_head"), bias=spec.bias)
    domain_head = None
    if spec.domain_head:
        drng = stream_rng(seed if domain_seed is None else domain_seed, "init:domain_head")
        domain_head = DomainHead(width, spec.attn_heads, spec.domain_hidden, spec.domain_count, drng, bias=spec.bias)
    return AdldaModel(extractor, label_head, domain_head, spec.class_count, spec.domain_count,
                      weighting=spec.weighting, tokens=1 if spec.extractor == "conv" else tokens, spec=spec)


# --------------------------------------------------------------------------
# loss


def domain_sample_weights(domain_labels: np.ndarray, weights: np.ndarray, k: int) -> np.ndarray:
    """w_i = a_{d_i} / (K * n_{d_i}); empty domains simply have no samples."""
    d = np.asarray(domain_labels, dtype=np.int64)
    counts = np.bincount(d, minlength=k).astype(np.float64)
    return weights[d] / (k * counts[d])


def adlda_loss(outputs: ForwardOutputs, class_labels, domain_labels, domain_count: Optional[int] = None):
    """Return (total, L_Y, L_D').

    L_D' = (1/K) * sum_d a_d * mean CE over samples of domain d. total is
    L_Y + L_D'; the adversarial sign on the feature extractor comes from the
    gradient-reversal layer inside the domain head, never from this sum.
    """
    ly = T.cross_entropy(outputs.class_logits, class_labels)
    if outputs.domain_logits is None:
        return ly, ly, None
    k = domain_count or outputs.domain_logits.shape[1]
    d = np.asarray(domain_labels)
    if d.shape != (outputs.domain_logits.shape[0],) or d.min() < 0 or d.max() >= k:
        raise ValueError(f"domain labels must be {outputs.domain_logits.shape[0]} integers in [0, {k})")
    ld = T.cross_entropy(outputs.domain_logits, d, weights=domain_sample_weights(d, outputs.domain_weights, k))
    return T.add(ly, ld), ly, ld


# --------------------------------------------------------------------------
# checkpoints: zip of manifest.json + one raw little-endian float32 array per
# parameter; fixed timestamps and ordering keep the bytes stable.

CHECKPOINT_FORMAT = "adlda-checkpoint"
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


def _zip_write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def checkpoint_bytes(model: AdldaModel, extra: Optional[dict] = None) -> bytes:
    if model.spec is None:
        raise CheckpointError("only models built from a ModelSpec can be checkpointed")
    params = list(model.named_parameters())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "model": model.spec.to_dict(),
        "domain_count": model.domain_count,
        "lambda": model.grl_lambda,
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in params],
    }
    manifest.update(extra or {})
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for n, p in params:
            _zip_write(zf, f"params/{n}.f32", np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(path, model: AdldaModel, extra: Optional[dict] = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_checkpoint(path, class_path_only: bool = False) -> Tuple[AdldaModel, dict]:
    """Rebuild a model from a checkpoint.

    ``class_path_only`` builds the model without a domain head and ignores
    any domain-head arrays (they may be absent altogether).
    """
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            if manifest.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(f"{path}: not an adlda checkpoint")
            spec = ModelSpec.from_dict(manifest["model"])
            if class_path_only:
                spec.domain_head = False
            model = build_model(spec, seed=0)
            names = set(zf.namelist())
            for name, p in model.named_parameters():
                entry = f"params/{name}.f32"
                if entry not in names:
                    raise CheckpointError(f"{path}: missing parameter {name}")
                arr = np.frombuffer(zf.read(entry), dtype="<f4")
                if arr.size != p.size:
                    raise CheckpointError(f"{path}: parameter {name} has {arr.size} values, model expects {p.size}")
                p.data = arr.reshape(p.shape).astype(p.dtype)
            if not class_path_only and "lambda" in manifest:
                model.set_lambda(manifest["lambda"])
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, TypeError, EOFError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    return model, manifest


def strip_domain_head(src, dst) -> None:
    """Copy a checkpoint without the domain-head arrays."""
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        manifest = json.loads(zin.read("manifest.json"))
        manifest["parameters"] = [p for p in manifest["parameters"] if not p["name"].startswith("domain_head.")]
        manifest["model"]["domain_head"] = False
        _zip_write(zout, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for name in zin.namelist():
            if name.startswith("params/") and not name.startswith("params/domain_head."):
                _zip_write(zout, name, zin.read(name))
