"""Mini-batch training of the two-path model.

One step evaluates L_Y and L_D' on the batch, runs a single backward pass of
L_Y + L_D' and applies SGD to every parameter. The gradient-reversal layer in
the domain head turns that single pass into the three updates

    theta_y <- theta_y - eta * dL_Y/dtheta_y
    theta_d <- theta_d - eta * dL_D'/dtheta_d
    theta_f <- theta_f - eta * (dL_Y/dtheta_f - lambda * dL_D'/dtheta_f)
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from adlda import tensor as T
from adlda.augment import AugFamily, label_and_augment, validate_partition, validate_probabilities
from adlda.datasets import Dataset, batches
from adlda.model import AdldaModel, adlda_loss, stream_seed
from adlda.tensor import Tensor

SCHEDULES = ("constant", "warmup")
METRICS_HEADER = ("epoch", "train_ly", "train_ld", "test_acc", "test_domain_acc", "wall_ms")


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, ly: float, ld: float):
        super().__init__(f"non-finite loss at step {step}: L_Y={ly!r}, L_D'={ld!r}")
        self.step, self.ly, self.ld = step, ly, ld

    def __reduce__(self):
        return (TrainingDivergence, (self.step, self.ly, self.ld))


@dataclass
class TrainConfig:
    eta: float = 0.05
    lambda_max: float = 0.1
    lambda_schedule: str = "constant"
    epochs: int = 10
    batch_size: int = 64
    momentum: float = 0.9
    seed: int = 0
    eval_every: int = 1
    all_variants: bool = False
    record_wall_time: bool = False

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("; ".join(errors))

    def validate(self) -> List[str]:
        errs = []
        if not (isinstance(self.eta, (int, float)) and self.eta >= 0 and math.isfinite(self.eta)):
            errs.append(f"eta: must be a finite number >= 0, got {self.eta!r}")
        if not (isinstance(self.lambda_max, (int, float)) and self.lambda_max >= 0 and math.isfinite(self.lambda_max)):
            errs.append(f"lambda_max: must be a finite number >= 0, got {self.lambda_max!r}")
        if self.lambda_schedule not in SCHEDULES:
            errs.append(f"lambda_schedule: must be one of {SCHEDULES}, got {self.lambda_schedule!r}")
        if not (isinstance(self.epochs, int) and self.epochs >= 0):
            errs.append(f"epochs: must be an integer >= 0, got {self.epochs!r}")
        if not (isinstance(self.batch_size, int) and self.batch_size >= 1):
            errs.append(f"batch_size: must be an integer >= 1, got {self.batch_size!r}")
        if not (isinstance(self.momentum, (int, float)) and 0 <= self.momentum < 1):
            errs.append(f"momentum: must be in [0, 1), got {self.momentum!r}")
        if not isinstance(self.seed, int):
            errs.append(f"seed: must be an integer, got {self.seed!r}")
        if not (isinstance(self.eval_every, int) and self.eval_every >= 1):
            errs.append(f"eval_every: must be an integer >= 1, got {self.eval_every!r}")
        return errs


def lambda_at(schedule: str, epoch: float, total_epochs: int, lambda_max: float) -> float:
    """DArate for ``epoch``: constant, or the sigmoid ramp 2/(1+e^(-10p)) - 1."""
    if schedule == "constant":
        return float(lambda_max)
    if schedule == "warmup":
        p = epoch / total_epochs if total_epochs > 0 else 1.0
        return float(lambda_max * (2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0))
    raise ValueError(f"unknown lambda schedule {schedule!r}")


class SGD:
    """v <- momentum * v + g;  p <- p - eta * v. With momentum 0 this is p - eta * g."""

    def __init__(self, params: Sequence[Tensor], eta: float, momentum: float = 0.0):
        self.params = list(params)
        self.eta, self.momentum = eta, momentum
        self.velocity: Dict[int, np.ndarray] = {}

    def step(self) -> int:
        updated = 0
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.momentum:
                v = self.velocity.get(id(p))
                v = g if v is None else v * p.dtype.type(self.momentum) + g
                self.velocity[id(p)] = v
            else:
                v = g
            p.data = p.data - p.dtype.type(self.eta) * v
            updated += p.size
        return updated

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


@dataclass
class StepReport:
    step: int
    ly: float
    ld: float
    updated: int
    samples: int


def train_step(model: AdldaModel, images, class_labels, domain_labels, optimizer: SGD, step: int = 0) -> StepReport:
    """One combined update on a domain-labelled batch."""
    if len(class_labels) == 0:
        raise ValueError("empty batch")
    optimizer.zero_grad()
    out = model.forward(images, domain_labels)
    total, ly, ld = adlda_loss(out, class_labels, domain_labels, model.domain_count)
    ly_v = float(ly.data)
    ld_v = float(ld.data) if ld is not None else float("nan")
    if not math.isfinite(ly_v) or (ld is not None and not math.isfinite(ld_v)):
        raise TrainingDivergence(step, ly_v, ld_v)
    T.backward(total)
    updated = optimizer.step()
    return StepReport(step, ly_v, ld_v, updated, len(class_labels))


def evaluate(model: AdldaModel, dataset: Dataset, batch_size: int = 500) -> Tuple[float, float]:
    """(accuracy, mean L_Y) on clean images through the class path only.

    argmax ties go to the lowest class index.
    """
    correct, loss_sum = 0, 0.0
    with T.no_grad():
        for imgs, labels, _ in batches(dataset, min(batch_size, len(dataset)), None):
            logits = model.forward_class(imgs)
            correct += int((np.argmax(logits.data, axis=1) == labels).sum())
            loss_sum += float(T.cross_entropy(logits, labels).data) * len(labels)
    return correct / len(dataset), loss_sum / len(dataset)


def evaluate_domain(model: AdldaModel, dataset: Dataset, partition, probabilities, key, batch_size: int = 500) -> float:
    """Domain-head accuracy on an augmented copy of ``dataset``; nan without a head."""
    if model.domain_head is None:
        return float("nan")
    aug = label_and_augment(dataset.images, dataset.labels, partition, probabilities, key)
    correct = 0
    with T.no_grad():
        for start in range(0, len(aug), batch_size):
            sl = slice(start, start + batch_size)
            logits, _ = model.forward_domain(aug.images[sl], aug.domain_labels[sl])
            correct += int((np.argmax(logits.data, axis=1) == aug.domain_labels[sl]).sum())
    return correct / len(aug)


@dataclass
class MetricsRow:
    epoch: int
    train_ly: float
    train_ld: float
    test_acc: float
    test_domain_acc: float
    wall_ms: float


@dataclass
class Metrics:
    rows: List[MetricsRow] = field(default_factory=list)
    epoch_wall_ms: List[float] = field(default_factory=list)

    @property
    def final(self) -> MetricsRow:
        return self.rows[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for r in self.rows:
            w.writerow([r.epoch] + [format_float(getattr(r, k)) for k in METRICS_HEADER[1:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


def format_float(x: float) -> str:
    return "nan" if x != x else repr(float(x))


@dataclass
class Trajectory:
    """Optional per-step parameter snapshots, for isolation checks."""

    groups: Tuple[str, ...] = ("feature", "label")
    snapshots: List[Dict[str, np.ndarray]] = field(default_factory=list)

    def record(self, model: AdldaModel) -> None:
        snap = {}
        for g in self.groups:
            for n, p in model.group(g):
                snap[n] = p.data.copy()
        self.snapshots.append(snap)


def fit(
    model: AdldaModel,
    train: Dataset,
    test: Dataset,
    partition: Sequence[AugFamily],
    probabilities,
    config: TrainConfig,
    trajectory: Optional[Trajectory] = None,
    progress=None,
) -> Metrics:
    """Train for ``config.epochs`` epochs; evaluate at start and every ``eval_every`` epochs.

    Shuffling, training augmentation and evaluation augmentation each use
    their own named stream derived from ``config.seed``.
    """
    validate_partition(partition)
    probabilities = validate_probabilities(probabilities, len(partition))
    if len(partition) != model.domain_count:
        raise ValueError(f"partition has {len(partition)} families but the model has {model.domain_count} domains")
    shuffle_seed = stream_seed(config.seed, "shuffle")
    aug_seed = stream_seed(config.seed, "augment")
    eval_key = (stream_seed(config.seed, "eval_augment"),)
    optimizer = SGD(model.trainable_parameters(), config.eta, config.momentum)
    metrics = Metrics()

    def evaluate_row(epoch, ly, ld, wall_ms):
        acc, _ = evaluate(model, test)
        dacc = evaluate_domain(model, test, partition, probabilities, eval_key)
        metrics.rows.append(MetricsRow(epoch, ly, ld, acc, dacc, wall_ms if config.record_wall_time else 0.0))

    evaluate_row(0, float("nan"), float("nan"), 0.0)
    step = 0
    for epoch in range(config.epochs):
        started = time.perf_counter()
        model.set_lambda(lambda_at(config.lambda_schedule, epoch, config.epochs, config.lambda_max))
        ly_sum, ld_sum, seen = 0.0, 0.0, 0
        for imgs, labels, idx in batches(train, min(config.batch_size, len(train)), shuffle_seed, epoch):
            batch = label_and_augment(imgs, labels, partition, probabilities, (aug_seed, epoch), indices=idx,
                                      all_variants=config.all_variants)
            report = train_step(model, batch.images, batch.class_labels, batch.domain_labels, optimizer, step)
            step += 1
            ly_sum += report.ly * report.samples
            ld_sum += report.ld * report.samples
            seen += report.samples
            if trajectory is not None:
                trajectory.record(model)
        if not all(np.isfinite(p.data).all() for p in model.parameters()):
            raise TrainingDivergence(step, float("nan"), float("nan"))
        wall_ms = (time.perf_counter() - started) * 1000.0
        metrics.epoch_wall_ms.append(wall_ms)
        if (epoch + 1) % config.eval_every == 0 or epoch + 1 == config.epochs:
            evaluate_row(epoch + 1, ly_sum / seen, ld_sum / seen, wall_ms)
        if progress is not None:
            progress(epoch + 1, metrics)
    return metrics
