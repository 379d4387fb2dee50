"""Run-configuration schemas and loading.

Configs are YAML (JSON is valid YAML). Relative paths resolve against the
directory of the config file. ``apply_overrides`` layers CLI values on top
before validation so that schema errors report the final field paths.
"""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Literal, Mapping

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import data, nets, toy
from .nets import NetworkSpec


class ConfigError(ValueError):
    """Schema violation; ``errors`` holds ``(field_path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LayerModel(_Strict):
    kind: Literal["conv", "maxpool", "relu", "linear", "flatten", "scale"]
    name: str = Field(min_length=1)
    out_channels: int | None = Field(default=None, gt=0)
    kernel: int | None = Field(default=None, gt=0)
    stride: int = Field(default=1, ge=1)
    pad: int = Field(default=0, ge=0)
    out_features: int | None = Field(default=None, gt=0)
    init_scale: float = 1.0


class SpecModel(_Strict):
    input_shape: list[int] = Field(min_length=1, max_length=3)
    layers: list[LayerModel] = Field(min_length=1)

    def build(self) -> NetworkSpec:
        layers = []
        for l in self.layers:
            d = l.model_dump(exclude_none=True)
            if l.kind == "maxpool" and "stride" not in l.model_fields_set:
                d["stride"] = l.kernel
            layers.append(nets.LayerSpec(**d))
        return NetworkSpec(tuple(layers), tuple(self.input_shape))


class DataRef(_Strict):
    manifest: str
    split: str | None = None
    part: Literal["train", "val", "test"] | None = None
    per_class: int | None = Field(default=None, gt=0)
    per_class_seed: int = 0

    @model_validator(mode="after")
    def _split_and_part(self):
        if (self.split is None) != (self.part is None):
            raise ValueError("split and part must be given together")
        return self


class OptimModel(_Strict):
    learning_rate: float = Field(default=0.001, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lr_schedule: list[tuple[int, float]] = []


class AdapterModel(_Strict):
    kind: Literal["conv1x1_relu", "identity"] = "conv1x1_relu"
    out_channels: int | None = Field(default=None, gt=0)
    use_scale: bool = False


class PointModel(_Strict):
    teacher_layer: str
    student_layer: str | None = None
    adapter: AdapterModel = AdapterModel()
    weight: float = Field(default=1.0, gt=0)


class LossModel(_Strict):
    kind: Literal["l2", "sigmoid"] = "l2"
    alpha: float = Field(default=1.0, gt=0)
    tau: float = 0.0


class StudentModel(_Strict):
    from_teacher: str | None = None
    spec: SpecModel | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.from_teacher is None) == (self.spec is None):
            raise ValueError("give exactly one of from_teacher or spec")
        return self


class TrainModel(_Strict):
    epochs: int = Field(default=30, gt=0)
    batch_size: int = Field(default=32, gt=0)
    learning_rate: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    lr_drop_epoch: int | None = Field(default=None, gt=0)
    seed: int = 0


class ArchModel(_Strict):
    num_classes: int | None = Field(default=None, gt=0)
    widths: list[int] = Field(default=[8, 16, 32], min_length=1)
    hidden: int = Field(default=64, gt=0)


class TransferFile(_Strict):
    teacher: str
    student: StudentModel
    points: list[PointModel] = Field(min_length=1)
    paired_data: DataRef
    loss: LossModel = LossModel()
    iterations: int = Field(gt=0)
    batch_size: int = Field(default=32, gt=0)
    optim: OptimModel = OptimModel()
    seed: int = 0


class TeacherFile(_Strict):
    train_data: DataRef
    test_data: DataRef | None = None
    arch: ArchModel = ArchModel()
    spec: SpecModel | None = None
    train: TrainModel = TrainModel()
    modality_tag: str = "s"


class HeadModel(_Strict):
    from_teacher: str | None = None
    above: str | None = None
    spec: SpecModel | None = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.spec is None and (self.from_teacher is None or self.above is None):
            raise ValueError("give spec, or both from_teacher and above")
        return self


class FinetuneFile(_Strict):
    student: str
    student_upto: str | None = None
    head: HeadModel
    mode: Literal["all", "fc_only", "from_scratch"] = "all"
    train_data: DataRef
    test_data: DataRef | None = None
    train: TrainModel = TrainModel()


class ProbeFile(_Strict):
    network: str
    reinit_seed: int | None = None
    layer: str
    train_data: DataRef
    test_data: DataRef
    max_iter: int = Field(default=500, gt=0)


class SweepFile(_Strict):
    teacher: str
    paired_data: DataRef
    points: list[str] = Field(min_length=1)
    adapter: AdapterModel = AdapterModel()
    loss: LossModel = LossModel()
    iterations: int = Field(gt=0)
    batch_size: int = Field(default=32, gt=0)
    optim: OptimModel = OptimModel()
    seed: int = 0
    train_data: DataRef
    test_data: DataRef
    train: TrainModel = TrainModel()


class ZeroShotFile(_Strict):
    student: str
    teacher: str
    adapter: str | None = None
    seam: str
    test_data: DataRef
    reference_data: DataRef | None = None


class ModelRef(_Strict):
    checkpoint: str
    data: DataRef


class EvalFile(_Strict):
    models: list[ModelRef] = Field(min_length=1)
    metric: Literal["acc", "map"] = "acc"
    weights: list[float] | None = None


class GenDataFile(_Strict):
    kind: Literal["shapes", "invertible_affine", "channel_permute", "complementary_halves"] = "shapes"
    scenes: int = Field(default=200, gt=0)
    num_classes: int = Field(default=4, gt=0, le=len(data.SHAPE_CLASSES))
    frames_per_scene: int = Field(default=data.FRAMES_PER_SCENE, gt=0)
    size: int = Field(default=32, ge=8)
    channels: int = Field(default=3, gt=0)
    noise: float = Field(default=0.08, ge=0)
    clutter: int = Field(default=0, ge=0)
    seed: int = 0
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    modality_names: tuple[str, str] = ("s", "d")

    @model_validator(mode="after")
    def _fractions(self):
        if min(self.split_fractions) < 0 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError("split_fractions must be non-negative and sum to 1")
        return self


class GradcheckFile(_Strict):
    seed: int = 0
    probes: int = Field(default=3, gt=0)
    eps: float = Field(default=1e-6, gt=0)
    tolerance: float = Field(default=1e-5, gt=0)


SCHEMAS: dict[str, type[_Strict]] = {
    "transfer": TransferFile,
    "train-teacher": TeacherFile,
    "finetune": FinetuneFile,
    "probe": ProbeFile,
    "sweep-layers": SweepFile,
    "zero-shot": ZeroShotFile,
    "eval": EvalFile,
    "gen-data": GenDataFile,
    "gradcheck": GradcheckFile,
}


def read_config_file(path: str | os.PathLike) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    obj = yaml.safe_load(text)
    if obj is None:
        return {}
    if not isinstance(obj, dict):
        raise ConfigError([("<root>", "config must be a mapping")])
    return obj


def parse_override(expr: str) -> tuple[list[str], Any]:
    """``a.b.0.c=value``; the value is parsed as YAML (so numbers, lists work)."""
    if "=" not in expr:
        raise ConfigError([(expr, "override must look like key.path=value")])
    key, raw = expr.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(raw: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict[str, Any]:
    out = copy.deepcopy(dict(raw))
    for dotted, value in overrides.items():
        keys = dotted.split(".") if isinstance(dotted, str) else list(dotted)
        node: Any = out
        for k in keys[:-1]:
            if isinstance(node, list):
                node = node[int(k)]
            else:
                node = node.setdefault(k, {})
        last = keys[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return out


def validate(command: str, raw: Mapping[str, Any]):
    return validate_model(SCHEMAS[command], raw)


def validate_model(schema: type[BaseModel], raw: Mapping[str, Any]):
    try:
        return schema.model_validate(raw)
    except ValidationError as exc:
        errors = [(".".join(str(p) for p in e["loc"]) or "<root>", e["msg"]) for e in exc.errors()]
        raise ConfigError(errors) from None


class Resolver:
    """Resolves config-relative paths and loads the files they name."""

    def __init__(self, base_dir: str | os.PathLike):
        self.base = Path(base_dir)

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.base / q

    def dataset(self, ref: DataRef):
        ds = data.load_dataset(self.path(ref.manifest))
        if ref.split is not None:
            spec = load_split(self.path(ref.split))
            parts = dict(zip(("train", "val", "test"), data.split_by_scene(ds, spec)))
            ds = parts[ref.part]
        if ref.per_class is not None:
            if not isinstance(ds, data.LabeledDataset):
                raise ConfigError([("per_class", "only labeled datasets can be subsampled per class")])
            ds = ds.per_class(ref.per_class, ref.per_class_seed)
        return ds

    def network(self, p: str) -> nets.Network:
        return nets.load_checkpoint(self.path(p))


def save_split(spec: data.SplitSpec, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(
        json.dumps({k: sorted(getattr(spec, k)) for k in ("train", "val", "test")}, indent=1) + "\n", encoding="utf-8"
    )
    return path


def load_split(path: str | os.PathLike) -> data.SplitSpec:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return data.SplitSpec(frozenset(obj["train"]), frozenset(obj["val"]), frozenset(obj["test"]))


def student_spec_from(model: StudentModel, teacher: nets.Network) -> NetworkSpec:
    if model.spec is not None:
        return model.spec.build()
    return toy.lower_spec(teacher.spec, model.from_teacher)


def head_spec_from(model: HeadModel, resolver: Resolver) -> NetworkSpec:
    if model.spec is not None:
        return model.spec.build()
    teacher = resolver.network(model.from_teacher)
    return toy.upper_spec(teacher.spec, model.above)


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not serialisable: {type(obj)}")
