"""Paired and labeled datasets, toy generators, scene splits and batching.

Samples are stored stacked (``N x C x H x W`` arrays) with parallel id
arrays; the ``samples`` properties expose the per-sample tuple view.

On disk a dataset is a JSON manifest plus one or more PTEN files. Every
sample entry in the manifest names a file (relative to the manifest) and a
tensor key inside it::

    {"format": "modal-distill-dataset", "version": 1, "kind": "paired",
     "modality_names": ["rgb", "depth"],
     "scenes": ["s0000", ...],
     "samples": [{"scene_id": "s0000", "frame_id": 0,
                  "s": {"file": "tensors.pten", "tensor": "s/000000"},
                  "d": {"file": "tensors.pten", "tensor": "d/000000"}}, ...]}

Labeled manifests use ``"kind": "labeled"``, carry ``class_names`` and give
each sample ``{"file", "tensor", "label"}`` plus optional scene/frame ids.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import rng
from .pten import load_pten, save_pten

FRAMES_PER_SCENE = 5
DATASET_FORMAT = "modal-distill-dataset"

SHAPE_CLASSES = (
    "square",
    "disk",
    "ring",
    "plus",
    "triangle",
    "cross",
    "frame",
    "bars",
)


def _fp32(a: np.ndarray) -> np.ndarray:
    # in-memory float64 values that survive a float32 file round trip exactly
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class LabeledDataset:
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    scene_ids: list[str] | None = None
    frame_ids: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")
        if self.frame_ids is not None:
            self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def samples(self) -> list[tuple[np.ndarray, int]]:
        return [(self.images[i], int(self.labels[i])) for i in range(len(self))]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(
            self.images[idx],
            self.labels[idx],
            list(self.class_names),
            None if self.scene_ids is None else [self.scene_ids[i] for i in idx],
            None if self.frame_ids is None else self.frame_ids[idx],
        )

    def per_class(self, n: int, seed: int = 0) -> "LabeledDataset":
        """At most ``n`` samples of every class, drawn with a seeded shuffle."""
        order = rng.generator(seed, "per_class").permutation(len(self))
        picked = []
        for c in range(self.num_classes):
            picked.extend(order[self.labels[order] == c][:n].tolist())
        return self.subset(sorted(picked))


@dataclass
class PairedDataset:
    scene_ids: list[str]
    frame_ids: np.ndarray
    s: np.ndarray
    d: np.ndarray
    modality_names: tuple[str, str] = ("s", "d")

    def __post_init__(self):
        self.frame_ids = np.asarray(self.frame_ids, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.float64)
        self.d = np.asarray(self.d, dtype=np.float64)
        n = len(self.scene_ids)
        if not (len(self.frame_ids) == len(self.s) == len(self.d) == n):
            raise ValueError("paired arrays and ids must have equal length")
        self.modality_names = tuple(self.modality_names)

    def __len__(self) -> int:
        return len(self.scene_ids)

    @property
    def samples(self) -> list[tuple[str, int, np.ndarray, np.ndarray]]:
        return [(self.scene_ids[i], int(self.frame_ids[i]), self.s[i], self.d[i]) for i in range(len(self))]

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(
            [self.scene_ids[i] for i in idx], self.frame_ids[idx], self.s[idx], self.d[idx], self.modality_names
        )


@dataclass(frozen=True)
class SplitSpec:
    train: frozenset[str]
    val: frozenset[str]
    test: frozenset[str]

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(self, name, frozenset(getattr(self, name)))
        overlap = (self.train & self.val) | (self.train & self.test) | (self.val & self.test)
        if overlap:
            raise ValueError(f"split sets overlap on scenes {sorted(overlap)[:5]}")


class UnassignedSceneError(ValueError):
    pass


def random_split(scene_ids: Sequence[str], fractions=(0.6, 0.2, 0.2), seed: int = 0) -> SplitSpec:
    scenes = sorted(set(scene_ids))
    order = rng.generator(seed, "split").permutation(len(scenes))
    n_train = int(round(fractions[0] * len(scenes)))
    n_val = int(round(fractions[1] * len(scenes)))
    pick = [scenes[i] for i in order]
    return SplitSpec(frozenset(pick[:n_train]), frozenset(pick[n_train : n_train + n_val]), frozenset(pick[n_train + n_val :]))


def split_by_scene(dataset, spec: SplitSpec):
    """Partition a dataset with scene ids into (train, val, test) by scene."""
    ids = dataset.scene_ids
    if ids is None:
        raise ValueError("dataset carries no scene ids")
    parts: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i, sid in enumerate(ids):
        if sid in spec.train:
            parts["train"].append(i)
        elif sid in spec.val:
            parts["val"].append(i)
        elif sid in spec.test:
            parts["test"].append(i)
        else:
            raise UnassignedSceneError(f"scene {sid!r} is not assigned to any split")
    return tuple(dataset.subset(parts[k]) for k in ("train", "val", "test"))


@dataclass
class PairBatch:
    scene_ids: list[str]
    frame_ids: np.ndarray
    s: np.ndarray
    d: np.ndarray


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return rng.generator(seed, f"batches/{epoch}").permutation(n)


def batches(dataset, batch_size: int, seed: int, epoch: int) -> Iterator:
    """Seeded shuffled batches; the final short batch is emitted.

    Paired datasets yield :class:`PairBatch`; labeled ones ``(images, labels)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(dataset), seed, epoch)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if isinstance(dataset, PairedDataset):
            yield PairBatch([dataset.scene_ids[i] for i in idx], dataset.frame_ids[idx], dataset.s[idx], dataset.d[idx])
        else:
            yield dataset.images[idx], dataset.labels[idx]


def endless_batches(dataset, batch_size: int, seed: int) -> Iterator:
    epoch = 0
    while True:
        yield from batches(dataset, batch_size, seed, epoch)
        epoch += 1


# ---------------------------------------------------------------- toy images


def _draw_shape(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float, angle: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u, v = ca * dx + sa * dy, -sa * dx + ca * dy
    t = max(1.2, 0.3 * r)
    if kind == "square":
        return (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
    if kind == "disk":
        return u * u + v * v <= r * r
    if kind == "ring":
        d2 = u * u + v * v
        return (d2 <= r * r) & (d2 >= (r - t) ** 2)
    if kind == "plus":
        return ((np.abs(u) <= t / 2 + 0.3) & (np.abs(v) <= r)) | ((np.abs(v) <= t / 2 + 0.3) & (np.abs(u) <= r))
    if kind == "triangle":
        return (v <= r * 0.7) & (v >= -r * 0.9 + 1.8 * np.abs(u))
    if kind == "cross":
        a, b = (u + v) / np.sqrt(2), (u - v) / np.sqrt(2)
        return ((np.abs(a) <= t / 2 + 0.3) & (np.abs(b) <= r)) | ((np.abs(b) <= t / 2 + 0.3) & (np.abs(a) <= r))
    if kind == "frame":
        inner = r * 0.8 - t
        outer = (np.abs(u) <= r * 0.8) & (np.abs(v) <= r * 0.8)
        return outer & ~((np.abs(u) < inner) & (np.abs(v) < inner))
    if kind == "bars":
        return (np.abs(u) <= r) & (np.abs(np.abs(v) - r * 0.5) <= t / 2 + 0.2)
    raise ValueError(f"unknown shape {kind!r}")


def make_toy_shapes(
    num_scenes: int,
    num_classes: int = 4,
    seed: int = 0,
    size: int = 32,
    channels: int = 3,
    frames_per_scene: int = FRAMES_PER_SCENE,
    noise: float = 0.08,
    scene_prefix: str = "s",
    clutter: int = 0,
) -> LabeledDataset:
    """Procedural C-class shape images grouped into multi-frame scenes.

    A scene fixes the class, colours, size and orientation of one shape;
    its frames jitter position and pixel noise, echoing consecutive video
    frames. ``clutter`` adds that many small distractor bars per scene.
    Classes cycle over scenes so counts stay balanced.
    """
    if not 1 <= num_classes <= len(SHAPE_CLASSES):
        raise ValueError(f"num_classes must lie in [1, {len(SHAPE_CLASSES)}]")
    g = rng.generator(seed, "toy_shapes")
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    n = num_scenes * frames_per_scene
    images = np.empty((n, channels, size, size))
    labels = np.empty(n, dtype=np.int64)
    scene_ids: list[str] = []
    frame_ids = np.empty(n, dtype=np.int64)
    classes = np.arange(num_scenes) % num_classes
    g.shuffle(classes)
    width = max(3, len(str(num_scenes - 1)))
    k = 0
    for sc in range(num_scenes):
        label = int(classes[sc])
        fg = g.uniform(0.4, 1.0, channels)
        bg = g.uniform(0.0, 0.35, channels)
        r = g.uniform(0.2, 0.33) * size
        angle = g.uniform(-0.3, 0.3)
        cy0 = g.uniform(-0.18, 0.18) * size + (size - 1) / 2
        cx0 = g.uniform(-0.18, 0.18) * size + (size - 1) / 2
        sid = f"{scene_prefix}{sc:0{width}d}"
        junk = np.zeros((size, size))
        junk_col = g.uniform(0.3, 1.0, channels)
        for _ in range(clutter):
            jy, jx = g.integers(0, size - 3, 2)
            if g.random() < 0.5:
                junk[jy : jy + 2, jx : jx + 5] = 1.0
            else:
                junk[jy : jy + 5, jx : jx + 2] = 1.0
        for f in range(frames_per_scene):
            cy = cy0 + g.uniform(-1.5, 1.5)
            cx = cx0 + g.uniform(-1.5, 1.5)
            mask = _draw_shape(SHAPE_CLASSES[label], yy, xx, cy, cx, r, angle).astype(np.float64)
            img = bg[:, None, None] + (fg - bg)[:, None, None] * mask[None]
            if clutter:
                img = np.where((junk > 0)[None] & (mask == 0)[None], junk_col[:, None, None], img)
            img = img + g.normal(0.0, noise, img.shape)
            images[k] = img
            labels[k] = label
            scene_ids.append(sid)
            frame_ids[k] = f
            k += 1
    return LabeledDataset(_fp32(images), labels, list(SHAPE_CLASSES[:num_classes]), scene_ids, frame_ids)


# ------------------------------------------------------- modality transforms


@dataclass(frozen=True)
class ChannelAffine:
    """Per-pixel invertible affine map on the channel vector: ``A @ x + b``."""

    matrix: np.ndarray
    offset: np.ndarray

    @classmethod
    def seeded(cls, channels: int, seed: int) -> "ChannelAffine":
        g = rng.generator(seed, "invertible_affine")
        q, _ = np.linalg.qr(g.normal(size=(channels, channels)))
        a = q * g.uniform(0.6, 1.4, channels)[None, :]
        b = g.uniform(-0.3, 0.3, channels)
        return cls(a, b)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.einsum("ij,njhw->nihw", self.matrix, x) + self.offset[None, :, None, None]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        inv = np.linalg.inv(self.matrix)
        return np.einsum("ij,njhw->nihw", inv, y - self.offset[None, :, None, None])


@dataclass(frozen=True)
class ChannelPermutation:
    perm: np.ndarray

    @classmethod
    def seeded(cls, channels: int, seed: int) -> "ChannelPermutation":
        g = rng.generator(seed, "channel_permute")
        perm = np.arange(channels)
        if channels > 1:
            # a shuffle may return the identity; rotate in that case
            perm = g.permutation(channels)
            if np.all(perm == np.arange(channels)):
                perm = np.roll(perm, 1)
        return cls(perm)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return x[:, self.perm]

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return y[:, np.argsort(self.perm)]


@dataclass
class SyntheticPairs:
    paired: PairedDataset
    labeled_s: LabeledDataset
    labeled_d: LabeledDataset
    transform: object | None = None


def _halve_width(x: np.ndarray) -> np.ndarray:
    return 0.5 * (x[..., 0::2] + x[..., 1::2])


def generate_paired_synthetic(kind: str, base: LabeledDataset, seed: int = 0, modality_names=None) -> SyntheticPairs:
    """Derive a paired two-modality dataset from ``base``.

    ``invertible_affine`` and ``channel_permute`` keep ``base`` as modality s
    and transform it into modality d. ``complementary_halves`` builds joint
    images whose left half shows one base sample and right half another,
    labelled by the pair ``label_left * C + label_right``; modality s keeps
    only the left half and modality d only the right half.
    """
    if len(base) == 0:
        raise ValueError("base dataset is empty")
    n = len(base)
    scene_ids = base.scene_ids or [f"s{i // FRAMES_PER_SCENE:05d}" for i in range(n)]
    frame_ids = base.frame_ids if base.frame_ids is not None else np.arange(n) % FRAMES_PER_SCENE
    names = tuple(modality_names or ("s", "d"))
    channels = base.images.shape[1]

    if kind in ("invertible_affine", "channel_permute"):
        tf = ChannelAffine.seeded(channels, seed) if kind == "invertible_affine" else ChannelPermutation.seeded(channels, seed)
        s = base.images
        d = _fp32(tf.apply(s))
        paired = PairedDataset(list(scene_ids), frame_ids, s, d, names)
        return SyntheticPairs(
            paired,
            LabeledDataset(s, base.labels, list(base.class_names), list(scene_ids), frame_ids),
            LabeledDataset(d, base.labels, list(base.class_names), list(scene_ids), frame_ids),
            tf,
        )

    if kind == "complementary_halves":
        c = base.num_classes
        scenes = sorted(set(scene_ids))
        by_scene: dict[str, list[int]] = {}
        for i, sid in enumerate(scene_ids):
            by_scene.setdefault(sid, []).append(i)
        partner = rng.generator(seed, "complementary_halves").permutation(len(scenes))
        left_idx, right_idx, ids, frames = [], [], [], []
        for a, sa in enumerate(scenes):
            sb = scenes[partner[a]]
            fa, fb = by_scene[sa], by_scene[sb]
            for f in range(min(len(fa), len(fb))):
                left_idx.append(fa[f])
                right_idx.append(fb[f])
                ids.append(f"{sa}|{sb}")
                frames.append(f)
        left = _halve_width(base.images[left_idx])
        right = _halve_width(base.images[right_idx])
        zeros = np.zeros_like(left)
        s = _fp32(np.concatenate([left, zeros], axis=-1))
        d = _fp32(np.concatenate([zeros, right], axis=-1))
        labels = base.labels[left_idx] * c + base.labels[right_idx]
        class_names = [f"{p}|{q}" for p in base.class_names for q in base.class_names]
        frames_arr = np.asarray(frames)
        paired = PairedDataset(ids, frames_arr, s, d, names)
        return SyntheticPairs(
            paired,
            LabeledDataset(s, labels, class_names, list(ids), frames_arr),
            LabeledDataset(d, labels, class_names, list(ids), frames_arr),
            None,
        )
    raise ValueError(f"unknown synthetic kind {kind!r}")


# ------------------------------------------------------------------ file io


def save_dataset(dataset, directory: str | os.PathLike, tensor_file: str = "tensors.pten") -> Path:
    """Write ``manifest.json`` plus one PTEN file into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, np.ndarray] = {}
    samples = []
    if isinstance(dataset, PairedDataset):
        for i in range(len(dataset)):
            ks, kd = f"s/{i:06d}", f"d/{i:06d}"
            tensors[ks], tensors[kd] = dataset.s[i], dataset.d[i]
            samples.append(
                {
                    "scene_id": dataset.scene_ids[i],
                    "frame_id": int(dataset.frame_ids[i]),
                    "s": {"file": tensor_file, "tensor": ks},
                    "d": {"file": tensor_file, "tensor": kd},
                }
            )
        manifest = {"kind": "paired", "modality_names": list(dataset.modality_names)}
        scenes = dataset.scene_ids
    else:
        for i in range(len(dataset)):
            key = f"x/{i:06d}"
            tensors[key] = dataset.images[i]
            entry = {"file": tensor_file, "tensor": key, "label": int(dataset.labels[i])}
            if dataset.scene_ids is not None:
                entry["scene_id"] = dataset.scene_ids[i]
            if dataset.frame_ids is not None:
                entry["frame_id"] = int(dataset.frame_ids[i])
            samples.append(entry)
        manifest = {"kind": "labeled", "class_names": list(dataset.class_names)}
        scenes = dataset.scene_ids or []
    manifest.update(
        format=DATASET_FORMAT,
        version=1,
        scenes=sorted(set(scenes)),
        samples=samples,
    )
    save_pten(directory / tensor_file, tensors, {"kind": "dataset"})
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_dataset(manifest_path: str | os.PathLike):
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != DATASET_FORMAT:
        raise ValueError(f"{manifest_path}: not a dataset manifest")
    root = manifest_path.parent
    cache: dict[str, dict[str, np.ndarray]] = {}

    def fetch(ref) -> np.ndarray:
        f = ref["file"]
        if f not in cache:
            cache[f] = load_pten(root / f)[0]
        return cache[f][ref["tensor"]]

    samples = manifest["samples"]
    if manifest["kind"] == "paired":
        return PairedDataset(
            [e["scene_id"] for e in samples],
            np.array([e["frame_id"] for e in samples], dtype=np.int64),
            np.stack([fetch(e["s"]) for e in samples]) if samples else np.zeros((0,)),
            np.stack([fetch(e["d"]) for e in samples]) if samples else np.zeros((0,)),
            tuple(manifest["modality_names"]),
        )
    if manifest["kind"] == "labeled":
        has_scene = bool(samples) and all("scene_id" in e for e in samples)
        has_frame = bool(samples) and all("frame_id" in e for e in samples)
        return LabeledDataset(
            np.stack([fetch(e) for e in samples]) if samples else np.zeros((0,)),
            np.array([e["label"] for e in samples], dtype=np.int64),
            list(manifest["class_names"]),
            [e["scene_id"] for e in samples] if has_scene else None,
            np.array([e["frame_id"] for e in samples]) if has_frame else None,
        )
    raise ValueError(f"{manifest_path}: unknown dataset kind {manifest['kind']!r}")
