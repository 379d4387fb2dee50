"""Sequential network specs, seeded construction, tapped forward passes,
splitting, freezing and PTEN checkpoints."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from . import ops, rng
from .pten import load_pten, save_pten
from .tensor import ShapeError, Tensor, no_grad

LAYER_KINDS = ("conv", "maxpool", "relu", "linear", "flatten", "scale")
_PARAMETRIC = ("conv", "linear", "scale")


class SpecError(ValueError):
    """A network spec whose layers do not compose."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: int | None = None  # conv
    kernel: int | None = None  # conv / maxpool window
    stride: int = 1
    pad: int = 0
    out_features: int | None = None  # linear
    init_scale: float = 1.0  # scale

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "name": self.name}
        if self.kind == "conv":
            d.update(out_channels=self.out_channels, kernel=self.kernel, stride=self.stride, pad=self.pad)
        elif self.kind == "maxpool":
            d.update(kernel=self.kernel, stride=self.stride)
        elif self.kind == "linear":
            d.update(out_features=self.out_features)
        elif self.kind == "scale":
            d.update(init_scale=self.init_scale)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LayerSpec":
        return cls(**dict(d))


def conv(name: str, out_channels: int, kernel: int = 3, stride: int = 1, pad: int = 0) -> LayerSpec:
    return LayerSpec("conv", name, out_channels=out_channels, kernel=kernel, stride=stride, pad=pad)


def maxpool(name: str, kernel: int = 2, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", name, kernel=kernel, stride=kernel if stride is None else stride)


def relu(name: str) -> LayerSpec:
    return LayerSpec("relu", name)


def linear(name: str, out_features: int) -> LayerSpec:
    return LayerSpec("linear", name, out_features=out_features)


def flatten(name: str) -> LayerSpec:
    return LayerSpec("flatten", name)


def scale(name: str, init_scale: float = 1.0) -> LayerSpec:
    return LayerSpec("scale", name, init_scale=init_scale)


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        self.shapes()  # validates

    @property
    def names(self) -> list[str]:
        return [l.name for l in self.layers]

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(f"no layer named {name!r}; layers are {self.names}")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Per-sample output shape of every layer, by symbolic propagation."""
        seen: set[str] = set()
        shape = self.input_shape
        out: dict[str, tuple[int, ...]] = {}
        for layer in self.layers:
            if layer.kind not in LAYER_KINDS:
                raise SpecError(f"layer {layer.name!r}: unknown kind {layer.kind!r}")
            if layer.name in seen:
                raise SpecError(f"duplicate layer name {layer.name!r}")
            seen.add(layer.name)
            shape = _propagate(layer, shape)
            out[layer.name] = shape
        return out

    def output_shape(self) -> tuple[int, ...]:
        return list(self.shapes().values())[-1] if self.layers else self.input_shape

    def to_dict(self) -> dict[str, Any]:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkSpec":
        return cls(tuple(LayerSpec.from_dict(l) for l in d["layers"]), tuple(d["input_shape"]))


def _propagate(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    def fail(msg: str):
        raise SpecError(f"layer {layer.name!r} ({layer.kind}): {msg}; input shape {shape}")

    if layer.kind == "conv":
        if len(shape) != 3:
            fail("needs a CHW input")
        if not layer.out_channels or not layer.kernel or layer.kernel < 1:
            fail("needs positive out_channels and kernel")
        if layer.stride < 1 or layer.pad < 0:
            fail("needs stride >= 1 and pad >= 0")
        c, h, w = shape
        if h + 2 * layer.pad < layer.kernel or w + 2 * layer.pad < layer.kernel:
            fail(f"kernel {layer.kernel} exceeds padded input")
        return (
            layer.out_channels,
            ops.conv_output_size(h, layer.kernel, layer.stride, layer.pad),
            ops.conv_output_size(w, layer.kernel, layer.stride, layer.pad),
        )
    if layer.kind == "maxpool":
        if len(shape) != 3:
            fail("needs a CHW input")
        if not layer.kernel or layer.kernel < 1 or layer.stride < 1:
            fail("needs positive kernel and stride")
        c, h, w = shape
        if layer.kernel > h or layer.kernel > w:
            fail(f"window {layer.kernel} exceeds input")
        return (c, (h - layer.kernel) // layer.stride + 1, (w - layer.kernel) // layer.stride + 1)
    if layer.kind == "linear":
        if len(shape) != 1:
            fail("needs a flat input (add a flatten layer)")
        if not layer.out_features or layer.out_features < 1:
            fail("needs positive out_features")
        return (layer.out_features,)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    return shape


def _param_shapes(layer: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if layer.kind == "conv":
        return {
            "weight": (layer.out_channels, in_shape[0], layer.kernel, layer.kernel),
            "bias": (layer.out_channels,),
        }
    if layer.kind == "linear":
        return {"weight": (in_shape[0], layer.out_features), "bias": (layer.out_features,)}
    if layer.kind == "scale":
        return {"scale": (1,)}
    return {}


@dataclass
class Network:
    spec: NetworkSpec
    params: dict[str, dict[str, Tensor]]
    modality_tag: str = ""

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            (f"{layer.name}.{pname}", t)
            for layer in self.spec.layers
            for pname, t in self.params.get(layer.name, {}).items()
        ]

    def param_count(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.parameters() if t.requires_grad]

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.parameters()}

    def snapshot(self) -> dict[str, bytes]:
        return {n: t.data.tobytes() for n, t in self.parameters()}

    def __call__(self, x: Tensor) -> Tensor:
        return forward(self, x)[0]


def build_network(spec: NetworkSpec, init: str = "gaussian_fan_in", seed: int = 0, modality_tag: str = "") -> Network:
    """Instantiate ``spec``; conv/linear weights ~ N(0, 2/fan_in), biases 0."""
    if init not in ("gaussian_fan_in", "zeros"):
        raise ValueError(f"unknown init {init!r}")
    params: dict[str, dict[str, Tensor]] = {}
    shape = spec.input_shape
    shapes = spec.shapes()
    for layer in spec.layers:
        pshapes = _param_shapes(layer, shape)
        if pshapes:
            entry: dict[str, Tensor] = {}
            for pname, pshape in pshapes.items():
                if pname == "scale":
                    data = np.full(pshape, float(layer.init_scale))
                elif pname == "bias" or init == "zeros":
                    data = np.zeros(pshape)
                else:
                    fan_in = pshape[0] if layer.kind == "linear" else int(np.prod(pshape[1:]))
                    n = int(np.prod(pshape))
                    draws = rng.normals(seed, f"init/{layer.name}/{pname}", n)
                    data = (draws * math.sqrt(2.0 / fan_in)).reshape(pshape)
                entry[pname] = Tensor(data, requires_grad=True, name=f"{layer.name}.{pname}")
            params[layer.name] = entry
        shape = shapes[layer.name]
    return Network(spec, params, modality_tag)


def _apply(layer: LayerSpec, p: Mapping[str, Tensor], x: Tensor) -> Tensor:
    k = layer.kind
    if k == "conv":
        return ops.conv2d(x, p["weight"], p["bias"], stride=layer.stride, pad=layer.pad)
    if k == "maxpool":
        return ops.maxpool2d(x, layer.kernel, layer.stride)
    if k == "relu":
        return ops.relu(x)
    if k == "linear":
        return ops.linear(x, p["weight"], p["bias"])
    if k == "flatten":
        return ops.flatten(x)
    if k == "scale":
        return ops.scale(x, p["scale"])
    raise SpecError(f"unknown layer kind {k!r}")


def forward(net: Network, x: Tensor, taps: Iterable[str] = ()) -> tuple[Tensor, dict[str, Tensor]]:
    """Run ``net`` on a batch; also return the outputs of the tapped layers."""
    taps = set(taps)
    unknown = taps.difference(net.spec.names)
    if unknown:
        raise KeyError(f"unknown tap(s) {sorted(unknown)}; layers are {net.spec.names}")
    if tuple(x.shape[1:]) != net.spec.input_shape:
        raise ShapeError(f"input sample shape {tuple(x.shape[1:])} does not match spec {net.spec.input_shape}")
    feats: dict[str, Tensor] = {}
    h = x
    for layer in net.spec.layers:
        h = _apply(layer, net.params.get(layer.name, {}), h)
        if layer.name in taps:
            feats[layer.name] = h
    return h, feats


def predict(net: Network, x: np.ndarray, batch_size: int = 256, tap: str | None = None) -> np.ndarray:
    """Untracked batched forward; returns the output (or a tap) as an array."""
    outs = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            chunk = Tensor(x[start : start + batch_size])
            out, feats = forward(net, chunk, (tap,) if tap else ())
            outs.append((feats[tap] if tap else out).data)
    if not outs:
        shape = net.spec.shapes()[tap] if tap else net.spec.output_shape()
        return np.zeros((0, *shape))
    return np.concatenate(outs, axis=0)


def _subnet(net: Network, layers: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> Network:
    spec = NetworkSpec(tuple(layers), input_shape)
    params = {l.name: net.params[l.name] for l in layers if l.name in net.params}
    return Network(spec, params, net.modality_tag)


def truncate(net: Network, upto: str) -> Network:
    """Layers up to and including ``upto``; parameters are shared."""
    i = net.spec.index(upto)
    return _subnet(net, net.spec.layers[: i + 1], net.spec.input_shape)


def split_network(net: Network, at: str) -> tuple[Network, Network]:
    """Split into (lower, upper) at layer ``at``; parameters are shared, not copied."""
    i = net.spec.index(at)
    if i == 0 or i == len(net.spec.layers) - 1:
        raise SpecError(f"cannot split at boundary layer {at!r}")
    lower = _subnet(net, net.spec.layers[: i + 1], net.spec.input_shape)
    upper = _subnet(net, net.spec.layers[i + 1 :], net.spec.shapes()[at])
    return lower, upper


def concat_networks(lower: Network, upper: Network, modality_tag: str | None = None) -> Network:
    """Sequential composition; parameters are shared with both parts."""
    if lower.spec.output_shape() != upper.spec.input_shape:
        raise ShapeError(
            f"cannot compose: lower output {lower.spec.output_shape()} != upper input {upper.spec.input_shape}"
        )
    spec = NetworkSpec(lower.spec.layers + upper.spec.layers, lower.spec.input_shape)
    params = {**lower.params, **upper.params}
    return Network(spec, params, lower.modality_tag if modality_tag is None else modality_tag)


def freeze(net: Network, below_and_including: str) -> Network:
    """Mark parameters of every layer up to ``below_and_including`` as frozen."""
    i = net.spec.index(below_and_including)
    for layer in net.spec.layers[: i + 1]:
        for t in net.params.get(layer.name, {}).values():
            t.requires_grad = False
            t.grad = None
    return net


def clone(net: Network) -> Network:
    params = {
        lname: {pn: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name) for pn, t in entry.items()}
        for lname, entry in net.params.items()
    }
    return Network(net.spec, params, net.modality_tag)


def save_checkpoint(net: Network, path: str | os.PathLike, extra: Mapping[str, Any] | None = None) -> Path:
    meta = {
        "kind": "checkpoint",
        "modality_tag": net.modality_tag,
        "spec": net.spec.to_dict(),
        "frozen": [n for n, t in net.parameters() if not t.requires_grad],
    }
    if extra:
        meta["extra"] = dict(extra)
    return save_pten(path, net.state_arrays(), meta)


def load_checkpoint(path: str | os.PathLike) -> Network:
    tensors, meta = load_pten(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path}: PTEN file is not a network checkpoint")
    spec = NetworkSpec.from_dict(meta["spec"])
    frozen = set(meta.get("frozen", []))
    net = build_network(spec, init="zeros")
    for name, t in net.parameters():
        if name not in tensors:
            raise ValueError(f"{path}: checkpoint is missing tensor {name!r}")
        if tuple(tensors[name].shape) != t.shape:
            raise ValueError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, spec wants {t.shape}")
        t.data = tensors[name]
        t.requires_grad = name not in frozen
    net.modality_tag = meta.get("modality_tag", "")
    return net
