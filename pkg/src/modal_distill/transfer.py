"""Supervision transfer: fit a student on modality d to a frozen teacher's
mid-level features on paired modality-s inputs, then evaluate the student
by fine-tuning, frozen probes and layer sweeps."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import nets, ops
from .data import LabeledDataset, PairBatch, PairedDataset, batches, endless_batches
from .nets import LayerSpec, Network, NetworkSpec
from .optim import OptimState, sgd_step
from .tensor import ShapeError, Tensor, no_grad

log = logging.getLogger(__name__)


class TransferError(RuntimeError):
    pass


class CalibrationError(TransferError):
    pass


class DivergenceError(TransferError):
    pass


@dataclass(frozen=True)
class AdapterSpec:
    kind: str = "conv1x1_relu"  # or "identity"
    out_channels: int | None = None  # defaults to the teacher tap's channels
    use_scale: bool = False

    def __post_init__(self):
        if self.kind not in ("conv1x1_relu", "identity"):
            raise ValueError(f"unknown adapter kind {self.kind!r}")


@dataclass(frozen=True)
class TransferPoint:
    teacher_layer: str
    student_layer: str
    adapter: AdapterSpec = AdapterSpec()
    weight: float = 1.0

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"transfer point weight must be > 0, got {self.weight}")

    @property
    def key(self) -> str:
        return f"{self.teacher_layer}->{self.student_layer}"


@dataclass(frozen=True)
class LossSpec:
    kind: str = "l2"  # or "sigmoid"
    alpha: float = 1.0
    tau: float = 0.0

    def __call__(self, x: Tensor, y: Tensor) -> Tensor:
        if self.kind == "l2":
            return ops.l2_match_loss(x, y)
        if self.kind == "sigmoid":
            return ops.sigmoid_match_loss(x, y, self.alpha, self.tau)
        raise ValueError(f"unknown loss kind {self.kind!r}")


@dataclass
class TransferConfig:
    teacher: Network
    student_spec: NetworkSpec
    points: list[TransferPoint]
    paired_data: PairedDataset
    loss: LossSpec = LossSpec()
    iterations: int = 1000
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    lr_schedule: list[tuple[int, float]] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        if self.iterations <= 0:
            raise ValueError("iterations must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.points:
            raise ValueError("at least one transfer point is required")
        if len(self.paired_data) == 0:
            raise ValueError("paired dataset is empty")


@dataclass
class StepLosses:
    step: int
    per_point: dict[str, float]
    total: float


@dataclass
class TransferReport:
    loss_history: list[StepLosses]
    calibration: dict[str, float]
    student: Network
    adapters: dict[str, Network]
    wall_time: float

    @property
    def initial_loss(self) -> float:
        return self.loss_history[0].total

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1].total


# ------------------------------------------------------------------ adapters


def build_adapter(point: TransferPoint, student_shape: tuple[int, ...], teacher_shape: tuple[int, ...], seed: int) -> Network:
    """Map student features at ``point.student_layer`` into the teacher's tap space."""
    prefix = f"adapt.{point.student_layer}"
    spec_layers: list[LayerSpec] = []
    if point.adapter.kind == "identity":
        if tuple(student_shape) != tuple(teacher_shape):
            raise ShapeError(
                f"point {point.key}: identity adapter needs equal shapes, student {student_shape} vs teacher {teacher_shape}"
            )
    else:
        out = point.adapter.out_channels or teacher_shape[0]
        if len(student_shape) == 3:
            spec_layers.append(nets.conv(f"{prefix}.conv", out, kernel=1))
        else:
            spec_layers.append(nets.linear(f"{prefix}.fc", out))
        spec_layers.append(nets.relu(f"{prefix}.relu"))
    if point.adapter.use_scale:
        spec_layers.append(nets.scale(f"{prefix}.scale"))
    spec = NetworkSpec(tuple(spec_layers), tuple(student_shape))
    if spec.output_shape() != tuple(teacher_shape):
        raise ShapeError(
            f"point {point.key}: adapted student shape {spec.output_shape()} != teacher tap shape {tuple(teacher_shape)}"
        )
    return nets.build_network(spec, seed=seed)


def _scale_param(adapter: Network) -> Tensor | None:
    for layer in adapter.spec.layers:
        if layer.kind == "scale":
            return adapter.params[layer.name]["scale"]
    return None


def calibrate_scale(teacher_feats: np.ndarray, student_feats: np.ndarray) -> float:
    """Ratio of mean per-sample L2 norms, teacher over student."""
    t = np.asarray(teacher_feats, dtype=np.float64)
    s = np.asarray(student_feats, dtype=np.float64)
    t_norm = np.linalg.norm(t.reshape(len(t), -1), axis=1).mean()
    s_norm = np.linalg.norm(s.reshape(len(s), -1), axis=1).mean()
    if not s_norm > 0:
        raise CalibrationError("student features have zero norm on the calibration batch")
    return float(t_norm / s_norm)


# -------------------------------------------------------------------- steps


def _apply_adapter(adapter: Network, feat: Tensor) -> Tensor:
    return nets.forward(adapter, feat)[0] if adapter.spec.layers else feat


def teacher_targets(teacher: Network, x: np.ndarray, layers: Iterable[str]) -> dict[str, Tensor]:
    layers = list(dict.fromkeys(layers))
    with no_grad():
        _, feats = nets.forward(teacher, Tensor(x), layers)
    return {k: v.detach() for k, v in feats.items()}


def point_losses(
    pair_batch: PairBatch,
    teacher: Network,
    student: Network,
    points: Sequence[TransferPoint],
    adapters: dict[str, Network],
    loss: LossSpec,
) -> tuple[list[Tensor], dict[str, Tensor]]:
    targets = teacher_targets(teacher, pair_batch.s, [p.teacher_layer for p in points])
    _, sfeats = nets.forward(student, Tensor(pair_batch.d), {p.student_layer for p in points})
    losses = []
    for p in points:
        adapted = _apply_adapter(adapters[p.key], sfeats[p.student_layer])
        target = targets[p.teacher_layer]
        if adapted.shape != target.shape:
            raise ShapeError(f"point {p.key}: adapted student shape {adapted.shape} != teacher tap {target.shape}")
        losses.append(loss(adapted, target))
    return losses, targets


def transfer_step(
    pair_batch: PairBatch,
    teacher: Network,
    student: Network,
    points: Sequence[TransferPoint],
    loss: LossSpec,
    optim: OptimState,
    adapters: dict[str, Network],
) -> StepLosses:
    """One SGD step on the weighted sum of per-point matching losses."""
    losses, _ = point_losses(pair_batch, teacher, student, points, adapters, loss)
    params = student.trainable() + [item for p in points for item in adapters[p.key].trainable()]
    for _, t in params:
        t.grad = None
    total_t = None
    for p, l in zip(points, losses):
        term = l * p.weight
        total_t = term if total_t is None else total_t + term
    per_point = {p.key: l.item() for p, l in zip(points, losses)}
    total = 0.0
    for p in points:
        total += p.weight * per_point[p.key]
    if not math.isfinite(total):
        raise DivergenceError(f"non-finite transfer loss {total} at step {optim.step_count}")
    if total_t.requires_grad:
        total_t.backward()
        for _, t in params:
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
        sgd_step(params, optim)
    else:
        optim.step_count += 1
    return StepLosses(optim.step_count - 1, per_point, total)


def train_transfer(config: TransferConfig, on_step: Callable[[StepLosses], None] | None = None) -> TransferReport:
    config.validate()
    t0 = time.perf_counter()
    teacher = config.teacher
    student = nets.build_network(config.student_spec, seed=config.seed, modality_tag=config.paired_data.modality_names[1])
    t_shapes = teacher.spec.shapes()
    s_shapes = student.spec.shapes()
    adapters: dict[str, Network] = {}
    for i, p in enumerate(config.points):
        if p.teacher_layer not in t_shapes:
            raise KeyError(f"point {p.key}: teacher has no layer {p.teacher_layer!r}")
        if p.student_layer not in s_shapes:
            raise KeyError(f"point {p.key}: student has no layer {p.student_layer!r}")
        adapters[p.key] = build_adapter(p, s_shapes[p.student_layer], t_shapes[p.teacher_layer], seed=config.seed + 7919 * (i + 1))

    for pname, t in teacher.parameters():
        t.requires_grad = False

    stream = endless_batches(config.paired_data, config.batch_size, config.seed)
    first = next(stream)
    calibration: dict[str, float] = {}
    if any(p.adapter.use_scale for p in config.points):
        targets = teacher_targets(teacher, first.s, [p.teacher_layer for p in config.points])
        with no_grad():
            _, sfeats = nets.forward(student, Tensor(first.d), {p.student_layer for p in config.points})
            for p in config.points:
                sp = _scale_param(adapters[p.key])
                if sp is None:
                    continue
                sp.data[...] = 1.0
                adapted = _apply_adapter(adapters[p.key], sfeats[p.student_layer])
                value = calibrate_scale(targets[p.teacher_layer].data, adapted.data)
                sp.data[...] = value
                calibration[p.key] = value

    optim = OptimState(config.learning_rate, config.momentum, list(config.lr_schedule))
    history: list[StepLosses] = []
    batch = first
    for it in range(config.iterations):
        if it > 0:
            batch = next(stream)
        rec = transfer_step(batch, teacher, student, config.points, config.loss, optim, adapters)
        history.append(rec)
        if on_step is not None:
            on_step(rec)
        if it % 100 == 0:
            log.debug("transfer step %d loss %.6g", rec.step, rec.total)
    return TransferReport(history, calibration, student, adapters, time.perf_counter() - t0)


# ---------------------------------------------------------- classification


@dataclass
class TrainSettings:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_drop_epoch: int | None = None  # x0.1 from this epoch on
    seed: int = 0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_accuracy: float | None


def evaluate_accuracy(net: Network, data: LabeledDataset) -> float:
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    logits = nets.predict(net, data.images)
    return float(np.mean(np.argmax(logits, axis=1) == data.labels))


def train_classifier(
    net: Network,
    train: LabeledDataset,
    settings: TrainSettings,
    test: LabeledDataset | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> list[EpochRecord]:
    """Minimise cross-entropy over the trainable parameters of ``net``."""
    steps_per_epoch = math.ceil(len(train) / settings.batch_size)
    schedule = [(settings.lr_drop_epoch * steps_per_epoch, 0.1)] if settings.lr_drop_epoch else []
    optim = OptimState(settings.learning_rate, settings.momentum, schedule)
    history = []
    for epoch in range(settings.epochs):
        losses = []
        for xb, yb in batches(train, settings.batch_size, settings.seed, epoch):
            params = net.trainable()
            for _, t in params:
                t.grad = None
            out = nets.forward(net, Tensor(xb))[0]
            loss = ops.cross_entropy_loss(out, yb)
            if not math.isfinite(loss.item()):
                raise DivergenceError(f"non-finite classifier loss at epoch {epoch}")
            losses.append(loss.item())
            if loss.requires_grad:
                loss.backward()
                sgd_step(params, optim)
            else:
                optim.step_count += 1
        rec = EpochRecord(epoch, float(np.mean(losses)), evaluate_accuracy(net, test) if test is not None else None)
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return history


@dataclass
class FinetuneResult:
    classifier: Network
    history: list[EpochRecord]

    @property
    def accuracy(self) -> float | None:
        return self.history[-1].test_accuracy if self.history else None


def finetune(
    student: Network,
    head_spec: NetworkSpec,
    labeled: LabeledDataset,
    mode: str = "all",
    settings: TrainSettings | None = None,
    test: LabeledDataset | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> FinetuneResult:
    """Attach a fresh head to a student trunk and train on labels.

    ``all`` trains trunk and head, ``fc_only`` freezes the whole trunk,
    ``from_scratch`` discards the trunk's weights for a seeded random init.
    The student passed in is never modified.
    """
    settings = settings or TrainSettings()
    if mode not in ("all", "fc_only", "from_scratch"):
        raise ValueError(f"unknown finetune mode {mode!r}")
    if head_spec.input_shape != student.spec.output_shape():
        raise ShapeError(f"head input {head_spec.input_shape} does not match trunk output {student.spec.output_shape()}")
    if mode == "from_scratch":
        trunk = nets.build_network(student.spec, seed=settings.seed, modality_tag=student.modality_tag)
    else:
        trunk = nets.clone(student)
        for _, t in trunk.parameters():
            t.requires_grad = True
    head = nets.build_network(head_spec, seed=settings.seed)
    classifier = nets.concat_networks(trunk, head)
    if mode == "fc_only" and trunk.spec.layers:
        nets.freeze(classifier, trunk.spec.layers[-1].name)
    history = train_classifier(classifier, labeled, settings, test, on_epoch)
    return FinetuneResult(classifier, history)


# -------------------------------------------------------------------- probes


@dataclass
class ProbeResult:
    layer: str
    accuracy: float
    train_accuracy: float
    feature_dim: int


def pooled_features(net: Network, layer: str, x: np.ndarray) -> np.ndarray:
    feats = nets.predict(net, x, tap=layer)
    return feats.mean(axis=(2, 3)) if feats.ndim == 4 else feats.reshape(len(feats), -1)


def fit_softmax_regression(
    features: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    max_iter: int = 500,
    learning_rate: float = 0.5,
    tol: float = 1e-7,
) -> tuple[np.ndarray, np.ndarray]:
    """Full-batch momentum descent on cross-entropy; returns (weight, bias)."""
    w = Tensor(np.zeros((features.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    x = Tensor(features)
    optim = OptimState(learning_rate, 0.9)
    prev = math.inf
    for _ in range(max_iter):
        w.grad = b.grad = None
        loss = ops.cross_entropy_loss(ops.linear(x, w, b), labels)
        loss.backward()
        sgd_step([("w", w), ("b", b)], optim)
        cur = loss.item()
        if abs(prev - cur) < tol:
            break
        prev = cur
    return w.data, b.data


def linear_probe(
    net: Network,
    layer: str,
    labeled: LabeledDataset,
    test: LabeledDataset,
    max_iter: int = 500,
) -> ProbeResult:
    """Linear softmax classifier on frozen, spatially averaged features."""
    net.spec.index(layer)
    ftr = pooled_features(net, layer, labeled.images)
    fte = pooled_features(net, layer, test.images)
    if not np.any(ftr):
        warnings.warn(f"probe features at {layer!r} are all zero", RuntimeWarning, stacklevel=2)
    mu = ftr.mean(axis=0)
    sd = ftr.std(axis=0)
    sd[sd == 0] = 1.0
    ztr, zte = (ftr - mu) / sd, (fte - mu) / sd
    w, b = fit_softmax_regression(ztr, labeled.labels, labeled.num_classes, max_iter=max_iter)
    acc = float(np.mean(np.argmax(zte @ w + b, axis=1) == test.labels))
    tr_acc = float(np.mean(np.argmax(ztr @ w + b, axis=1) == labeled.labels))
    return ProbeResult(layer, acc, tr_acc, ftr.shape[1])


# --------------------------------------------------------------------- sweep


@dataclass
class SweepRow:
    teacher_layer: str
    student_layer: str
    accuracy: float | None
    final_loss: float | None
    skipped: str | None = None


def sweep_layers(
    template: TransferConfig,
    candidates: Sequence[tuple[str, str]],
    head_for: Callable[[str], NetworkSpec],
    labeled: LabeledDataset,
    test: LabeledDataset,
    settings: TrainSettings | None = None,
    student_spec_for: Callable[[str], NetworkSpec] | None = None,
    adapter: AdapterSpec | None = None,
) -> list[SweepRow]:
    """Transfer at each candidate point, then train only the upper layers.

    ``head_for(student_layer)`` gives the randomly initialised layers that sit
    above the transfer point; with ``student_spec_for`` the student is cut at
    that layer. Rows are returned ranked by accuracy, skipped rows last.
    """
    rows: list[SweepRow] = []
    for teacher_layer, student_layer in candidates:
        try:
            spec = student_spec_for(student_layer) if student_spec_for else template.student_spec
            point = TransferPoint(teacher_layer, student_layer, adapter or template.points[0].adapter)
            cfg = replace(template, student_spec=spec, points=[point])
            report = train_transfer(cfg)
            trunk = nets.truncate(report.student, student_layer)
            result = finetune(trunk, head_for(student_layer), labeled, "fc_only", settings, test)
            rows.append(SweepRow(teacher_layer, student_layer, result.accuracy, report.final_loss))
        except (ShapeError, KeyError, nets.SpecError) as exc:
            rows.append(SweepRow(teacher_layer, student_layer, None, None, skipped=str(exc)))
    done = sorted((r for r in rows if r.skipped is None), key=lambda r: -r.accuracy)
    return done + [r for r in rows if r.skipped is not None]
