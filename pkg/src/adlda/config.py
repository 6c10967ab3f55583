"""Run configuration: one JSON document, strictly validated.

Every problem is reported as ``<dotted.field>: <message>`` and unknown keys
are errors, so a typo such as ``lamda_max`` cannot be silently ignored.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from adlda.augment import DEFAULT_PARAMS, KINDS, AugFamily, default_partition, validate_probabilities
from adlda.datasets import (
    CIFAR_TEST_FILE,
    CIFAR_TRAIN_FILES,
    Dataset,
    SyntheticSpec,
    load_cifar10,
    load_mnist_idx,
    make_synthetic,
    seeded_subset,
)
from adlda.model import ModelSpec
from adlda.trainer import TrainConfig

CONFIG_VERSION = 1
DATASETS = ("synthetic", "cifar10", "mnist")
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DEFAULT_DARATES = (0.0, 0.1, 0.5, 1.0)


class ConfigError(ValueError):
    def __init__(self, errors: List[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass
class DatasetConfig:
    name: str = "synthetic"
    path: Optional[str] = None
    train_subset: Optional[int] = None
    test_subset: Optional[int] = None
    synthetic: Dict[str, Any] = field(default_factory=dict)


@dataclass
class AugmentConfig:
    families: List[AugFamily] = field(default_factory=default_partition)
    probabilities: Optional[List[float]] = None  # None: uniform over families

    def resolved_probabilities(self) -> List[float]:
        k = len(self.families)
        return list(self.probabilities) if self.probabilities is not None else [1.0 / k] * k


@dataclass
class DemoConfig:
    seeds: Tuple[int, ...] = tuple(range(10))
    adlda_lambda: float = 0.05


@dataclass
class RunConfig:
    seed: int
    dataset: DatasetConfig
    model: Dict[str, Any]
    augment: AugmentConfig
    train: Dict[str, Any]
    out_dir: Optional[str] = None
    demo: Optional[DemoConfig] = None
    raw: bytes = b""

    def train_config(self, seed: Optional[int] = None, **overrides) -> TrainConfig:
        kw = dict(self.train)
        kw.update(overrides)
        return TrainConfig(seed=self.seed if seed is None else seed, **kw)

    def model_spec(self, input_shape, class_count: int, **overrides) -> ModelSpec:
        kw = dict(self.model)
        kw.update(overrides)
        return ModelSpec(input_shape=tuple(input_shape), class_count=class_count,
                         domain_count=len(self.augment.families), **kw)

    def synthetic_spec(self, seed: Optional[int] = None) -> SyntheticSpec:
        return SyntheticSpec(**self.dataset.synthetic, seed=self.seed if seed is None else seed)

    def resolved(self) -> dict:
        """Plain-data view with every default filled in, for manifests."""
        return {
            "version": CONFIG_VERSION,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "dataset": {
                "name": self.dataset.name,
                "path": self.dataset.path,
                "train_subset": self.dataset.train_subset,
                "test_subset": self.dataset.test_subset,
                "synthetic": self.dataset.synthetic,
            },
            "model": self.model,
            "augment": {
                "families": [{"kind": f.kind, "params": f.params} for f in self.augment.families],
                "probabilities": self.augment.resolved_probabilities(),
            },
            "train": {k: v for k, v in vars(self.train_config()).items() if k != "seed"},
            "demo": None if self.demo is None else {"seeds": list(self.demo.seeds), "adlda_lambda": self.demo.adlda_lambda},
        }


def run_id(config_bytes: bytes, seed: int) -> str:
    return hashlib.sha256(config_bytes + b"\0seed=" + str(int(seed)).encode()).hexdigest()[:16]


def parse_seeds(text: str) -> List[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError([f"--seeds: expected comma-separated integers, got {text!r}"]) from None
    if not seeds:
        raise ConfigError(["--seeds: empty list"])
    if len(set(seeds)) != len(seeds):
        raise ConfigError([f"--seeds: duplicate seeds in {seeds}"])
    return seeds


# --------------------------------------------------------------------------
# validation helpers


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_keys(obj, allowed, path: str, errors: List[str]) -> bool:
    if not isinstance(obj, dict):
        errors.append(f"{path or '<root>'}: expected an object, got {type(obj).__name__}")
        return False
    for key in sorted(set(obj) - set(allowed)):
        errors.append(f"{path + '.' if path else ''}{key}: unknown key")
    return True


def _dataclass_section(obj, cls, path: str, errors: List[str], exclude=()) -> Dict[str, Any]:
    names = [f.name for f in fields(cls) if f.name not in exclude]
    if obj is None:
        return {}
    if not _check_keys(obj, names, path, errors):
        return {}
    return dict(obj)


def _parse_dataset(obj, errors: List[str]) -> DatasetConfig:
    if obj is None:
        errors.append("dataset: required")
        return DatasetConfig()
    if not _check_keys(obj, [f.name for f in fields(DatasetConfig)], "dataset", errors):
        return DatasetConfig()
    ds = DatasetConfig(**{k: v for k, v in obj.items()})
    if ds.name not in DATASETS:
        errors.append(f"dataset.name: must be one of {DATASETS}, got {ds.name!r}")
    for key in ("train_subset", "test_subset"):
        v = getattr(ds, key)
        if v is not None and not (_is_int(v) and v >= 1):
            errors.append(f"dataset.{key}: must be a positive integer or null, got {v!r}")
    if ds.name == "synthetic":
        if ds.path is not None:
            errors.append("dataset.path: not used by the synthetic dataset")
        if not isinstance(ds.synthetic, dict):
            errors.append("dataset.synthetic: expected an object")
        else:
            allowed = [f.name for f in fields(SyntheticSpec) if f.name != "seed"]
            if _check_keys(ds.synthetic, allowed, "dataset.synthetic", errors):
                try:
                    spec = SyntheticSpec(**ds.synthetic)
                    spec.resolved_means()
                    np.linalg.cholesky(spec.resolved_cov())
                except np.linalg.LinAlgError:
                    errors.append("dataset.synthetic.cov: not positive definite")
                except (TypeError, ValueError) as exc:
                    errors.append(f"dataset.synthetic: {exc}")
    else:
        if ds.synthetic:
            errors.append("dataset.synthetic: only valid for the synthetic dataset")
        if not isinstance(ds.path, str):
            errors.append(f"dataset.path: required for {ds.name}")
        elif not os.path.isdir(ds.path):
            errors.append(f"dataset.path: directory {ds.path!r} does not exist")
        else:
            needed = CIFAR_TRAIN_FILES + (CIFAR_TEST_FILE,) if ds.name == "cifar10" else sum(MNIST_FILES.values(), ())
            for fname in needed:
                if not os.path.isfile(os.path.join(ds.path, fname)):
                    errors.append(f"dataset.path: missing file {fname!r} in {ds.path!r}")
    return ds


def _parse_augment(obj, errors: List[str]) -> AugmentConfig:
    if obj is None:
        return AugmentConfig()
    if not _check_keys(obj, ["families", "probabilities"], "augment", errors):
        return AugmentConfig()
    families = default_partition()
    if "families" in obj:
        families = []
        raw = obj["families"]
        if not isinstance(raw, list):
            errors.append("augment.families: expected a list")
            raw = []
        for i, fam in enumerate(raw):
            path = f"augment.families[{i}]"
            if not _check_keys(fam, ["kind", "params"], path, errors):
                continue
            kind = fam.get("kind")
            if kind not in KINDS:
                errors.append(f"{path}.kind: must be one of {KINDS}, got {kind!r}")
                continue
            params = fam.get("params", {})
            if not isinstance(params, dict) or not all(_is_num(v) for v in params.values()):
                errors.append(f"{path}.params: expected an object of numbers")
                continue
            for key in sorted(set(params) - set(DEFAULT_PARAMS[kind])):
                errors.append(f"{path}.params.{key}: unknown key for {kind}")
            try:
                families.append(AugFamily(i, kind, {k: v for k, v in params.items() if k in DEFAULT_PARAMS[kind]}))
            except ValueError as exc:
                errors.append(f"{path}.params: {exc}")
        if len(families) == len(raw):
            if len(families) < 2:
                errors.append("augment.families: need at least two families (identity plus one more)")
            elif families[0].kind != "identity":
                errors.append("augment.families[0].kind: family 0 must be identity")
    probs = obj.get("probabilities")
    if probs is not None:
        if not isinstance(probs, list) or not all(_is_num(p) for p in probs):
            errors.append("augment.probabilities: expected a list of numbers")
            probs = None
        else:
            try:
                validate_probabilities(probs, len(families))
            except ValueError as exc:
                errors.append(f"augment.probabilities: {exc}")
    return AugmentConfig(families=families, probabilities=probs)


def _parse_model(obj, errors: List[str]) -> Dict[str, Any]:
    model = _dataclass_section(obj, ModelSpec, "model", errors, exclude=("input_shape", "class_count", "domain_count"))
    try:
        ModelSpec(input_shape=(1, 8, 8), class_count=2, **model)
    except (TypeError, ValueError) as exc:
        errors.append(f"model: {exc}")
    return model


def _parse_train(obj, errors: List[str]) -> Dict[str, Any]:
    train = _dataclass_section(obj, TrainConfig, "train", errors, exclude=("seed",))
    try:
        probe = TrainConfig.__new__(TrainConfig)
        for f in fields(TrainConfig):
            setattr(probe, f.name, train.get(f.name, f.default))
        errors.extend(f"train.{msg}" for msg in probe.validate())
    except TypeError as exc:
        errors.append(f"train: {exc}")
    return train


def _parse_demo(obj, errors: List[str]) -> Optional[DemoConfig]:
    if obj is None:
        return None
    if not _check_keys(obj, ["seeds", "adlda_lambda"], "demo", errors):
        return None
    demo = DemoConfig()
    if "seeds" in obj:
        seeds = obj["seeds"]
        if not isinstance(seeds, list) or not all(_is_int(s) for s in seeds) or len(set(seeds)) != len(seeds):
            errors.append("demo.seeds: expected a list of distinct integers")
        elif len(seeds) < 5:
            errors.append(f"demo.seeds: need at least 5 seeds, got {len(seeds)}")
        else:
            demo.seeds = tuple(seeds)
    if "adlda_lambda" in obj:
        lam = obj["adlda_lambda"]
        if not (_is_num(lam) and lam > 0):
            errors.append(f"demo.adlda_lambda: must be a finite number > 0, got {lam!r}")
        else:
            demo.adlda_lambda = float(lam)
    return demo


TOP_LEVEL = ("version", "seed", "out_dir", "dataset", "model", "augment", "train", "demo")


def parse_config(raw: bytes) -> RunConfig:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError([f"<root>: not valid JSON ({exc})"]) from None
    errors: List[str] = []
    if not _check_keys(obj, TOP_LEVEL, "", errors):
        raise ConfigError(errors)
    if obj.get("version") != CONFIG_VERSION:
        errors.append(f"version: must be {CONFIG_VERSION}, got {obj.get('version')!r}")
    seed = obj.get("seed")
    if not _is_int(seed):
        errors.append(f"seed: required integer, got {seed!r}")
    out_dir = obj.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errors.append("out_dir: expected a string")
    dataset = _parse_dataset(obj.get("dataset"), errors)
    model = _parse_model(obj.get("model"), errors)
    augment = _parse_augment(obj.get("augment"), errors)
    train = _parse_train(obj.get("train"), errors)
    demo = _parse_demo(obj.get("demo"), errors)
    if errors:
        raise ConfigError(errors)
    return RunConfig(seed=seed, dataset=dataset, model=model, augment=augment, train=train, out_dir=out_dir,
                     demo=demo, raw=raw)


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError([f"--config: cannot read {path!r} ({exc.strerror})"]) from None
    return parse_config(raw)


def load_datasets(cfg: RunConfig, seed: Optional[int] = None) -> Tuple[Dataset, Dataset]:
    """Train and test splits named by the config, subset with a seeded draw."""
    seed = cfg.seed if seed is None else seed
    ds = cfg.dataset
    if ds.name == "synthetic":
        train, test = make_synthetic(cfg.synthetic_spec(seed))
    elif ds.name == "cifar10":
        train, test = load_cifar10(ds.path)
    else:
        train = load_mnist_idx(*(os.path.join(ds.path, f) for f in MNIST_FILES["train"]), split="train")
        test = load_mnist_idx(*(os.path.join(ds.path, f) for f in MNIST_FILES["test"]), split="test")
    # subsets are fixed per config, not per replicate seed
    train = seeded_subset(train, ds.train_subset, cfg.seed)
    test = seeded_subset(test, ds.test_subset, cfg.seed + 1)
    return train, test


# --------------------------------------------------------------------------
# Grad-CAM comparison config

CAM_KEYS = ("version", "seed", "out_dir", "dataset", "darates", "checkpoints", "images", "classes", "alpha", "box")


@dataclass
class CamConfig:
    run: RunConfig  # carries seed, dataset and the raw bytes
    darates: List[float]
    checkpoints: Dict[float, str]
    images: List[int]
    classes: Optional[List[int]] = None
    alpha: float = 0.5
    box: Optional[Tuple[int, int, int, int]] = None
    out_dir: Optional[str] = None


def parse_cam_config(raw: bytes) -> CamConfig:
    try:
        obj = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError([f"<root>: not valid JSON ({exc})"]) from None
    errors: List[str] = []
    if not _check_keys(obj, CAM_KEYS, "", errors):
        raise ConfigError(errors)
    if obj.get("version") != CONFIG_VERSION:
        errors.append(f"version: must be {CONFIG_VERSION}, got {obj.get('version')!r}")
    if not _is_int(obj.get("seed")):
        errors.append(f"seed: required integer, got {obj.get('seed')!r}")
    dataset = _parse_dataset(obj.get("dataset"), errors)
    darates = obj.get("darates", list(DEFAULT_DARATES))
    if not isinstance(darates, list) or not darates or not all(_is_num(d) and d >= 0 for d in darates):
        errors.append("darates: expected a non-empty list of numbers >= 0")
        darates = []
    elif len(set(map(float, darates))) != len(darates):
        errors.append("darates: duplicate values")
    raw_ckpts = obj.get("checkpoints")
    if not isinstance(raw_ckpts, dict):
        errors.append("checkpoints: expected an object mapping DArate to checkpoint path")
        raw_ckpts = {}
    by_rate: Dict[float, str] = {}
    for key, path in raw_ckpts.items():
        try:
            by_rate[float(key)] = path
        except ValueError:
            errors.append(f"checkpoints.{key}: key must be a DArate number")
    for d in darates:
        path = by_rate.get(float(d))
        if path is None:
            errors.append(f"checkpoints: no checkpoint for DArate {d}")
        elif not isinstance(path, str) or not os.path.isfile(path):
            errors.append(f"checkpoints.{d}: file {path!r} does not exist")
    images = obj.get("images")
    if not isinstance(images, list) or not images or not all(_is_int(i) for i in images):
        errors.append("images: expected a non-empty list of integer indices")
        images = []
    classes = obj.get("classes")
    if classes is not None and (not isinstance(classes, list) or len(classes) != len(images)
                                or not all(_is_int(c) for c in classes)):
        errors.append("classes: expected null or one integer class per image")
    alpha = obj.get("alpha", 0.5)
    if not (_is_num(alpha) and 0 <= alpha <= 1):
        errors.append(f"alpha: must be in [0, 1], got {alpha!r}")
    box = obj.get("box")
    if box is not None and (not isinstance(box, list) or len(box) != 4 or not all(_is_int(b) and b >= 0 for b in box)):
        errors.append("box: expected null or [top, left, height, width]")
    out_dir = obj.get("out_dir")
    if out_dir is not None and not isinstance(out_dir, str):
        errors.append("out_dir: expected a string")
    if errors:
        raise ConfigError(errors)
    run = RunConfig(seed=obj["seed"], dataset=dataset, model={}, augment=AugmentConfig(), train={}, raw=raw)
    return CamConfig(run=run, darates=[float(d) for d in darates], checkpoints={float(d): by_rate[float(d)] for d in darates},
                     images=list(images), classes=classes, alpha=float(alpha),
                     box=tuple(box) if box is not None else None, out_dir=out_dir)


def load_cam_config(path) -> CamConfig:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError([f"--config: cannot read {path!r} ({exc.strerror})"]) from None
    return parse_cam_config(raw)
