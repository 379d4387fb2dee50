"""Desk-scale architectures shared by the recipes and the acceptance suite."""

from __future__ import annotations

from . import nets
from .nets import NetworkSpec


def teacher_spec(num_classes: int, input_shape=(3, 32, 32), widths=(8, 16, 32), hidden: int = 64) -> NetworkSpec:
    """Three conv blocks and two fully connected layers.

    Layer names follow the usual convention: ``conv{i}``, ``relu{i}``,
    ``pool{i}``, then ``flatten``, ``fc4``, ``relu4``, ``fc5``.
    """
    layers = []
    for i, w in enumerate(widths, start=1):
        layers += [nets.conv(f"conv{i}", w, kernel=3, pad=1), nets.relu(f"relu{i}"), nets.maxpool(f"pool{i}", 2)]
    layers += [
        nets.flatten("flatten"),
        nets.linear("fc4", hidden),
        nets.relu("relu4"),
        nets.linear("fc5", num_classes),
    ]
    return NetworkSpec(tuple(layers), tuple(input_shape))


def lower_spec(spec: NetworkSpec, upto: str) -> NetworkSpec:
    """Layers of ``spec`` up to and including ``upto``."""
    i = spec.index(upto)
    return NetworkSpec(spec.layers[: i + 1], spec.input_shape)


def upper_spec(spec: NetworkSpec, after: str) -> NetworkSpec:
    """Layers of ``spec`` strictly above ``after``, fed by its output shape."""
    i = spec.index(after)
    return NetworkSpec(spec.layers[i + 1 :], spec.shapes()[after])
