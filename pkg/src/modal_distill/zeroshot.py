"""Zero-shot franken networks and pre-softmax score fusion."""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nets
from .nets import Network
from .tensor import ShapeError, Tensor


class AssemblyError(ValueError):
    pass


@dataclass
class FrankenNetwork:
    """A target-modality lower stack feeding the source model's upper stack."""

    lower: Network
    upper: Network
    seam: str

    def __post_init__(self):
        if self.lower.spec.output_shape() != self.upper.spec.input_shape:
            raise AssemblyError(
                f"seam {self.seam!r}: lower output {self.lower.spec.output_shape()} "
                f"!= upper input {self.upper.spec.input_shape}"
            )

    def forward(self, x: Tensor) -> Tensor:
        return self.upper(self.lower(x))

    __call__ = forward

    def as_network(self) -> Network:
        return nets.concat_networks(self.lower, self.upper)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        return nets.predict(self.as_network(), x, batch_size)


def _load(net: Network | str | os.PathLike) -> Network:
    return net if isinstance(net, Network) else nets.load_checkpoint(net)


def assemble_franken(
    student: Network | str | os.PathLike,
    teacher: Network | str | os.PathLike,
    seam: str,
    adapter: Network | str | os.PathLike | None = None,
) -> FrankenNetwork:
    """Compose ``student`` (cut at ``seam``, then ``adapter``) with the teacher above ``seam``."""
    student, teacher = _load(student), _load(teacher)
    if seam not in student.spec.names:
        raise AssemblyError(f"seam {seam!r} is not a layer of the student ({student.spec.names})")
    if seam not in teacher.spec.names:
        raise AssemblyError(f"seam {seam!r} is not a layer of the teacher ({teacher.spec.names})")
    lower = nets.truncate(student, seam)
    if adapter is not None:
        adapter = _load(adapter)
        if adapter.spec.layers:
            try:
                lower = nets.concat_networks(lower, adapter)
            except ShapeError as exc:
                raise AssemblyError(str(exc)) from exc
    try:
        _, upper = nets.split_network(teacher, seam)
    except nets.SpecError as exc:
        raise AssemblyError(str(exc)) from exc
    return FrankenNetwork(lower, upper, seam)


def fuse_scores(score_sets: Sequence[np.ndarray | Tensor], weights: Sequence[float] | None = None) -> np.ndarray:
    """Elementwise (weighted) mean of pre-softmax class scores."""
    if not score_sets:
        raise ValueError("fuse_scores needs at least one score set")
    arrays = [np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64) for s in score_sets]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeError(f"score sets differ in shape: {shape} vs {a.shape}")
    if weights is None:
        return np.mean(np.stack(arrays), axis=0)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(arrays),) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative, one per score set, with positive sum")
    return np.tensordot(w / w.sum(), np.stack(arrays), axes=1)
