"""Differentiable layer kernels and losses.

All kernels take and return :class:`~modal_distill.tensor.Tensor` values and
compute in float64. Batches are the leading dimension everywhere.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_result


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an NCHW batch with OIKK filters, plus bias."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = weight.shape
    if c != i:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {i}")
    if kh != kw:
        raise ShapeError(f"conv2d: only square kernels are supported, got {kh}x{kw}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    k = kh
    if h + 2 * pad < k or w + 2 * pad < k:
        raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {k}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # im2col rows ordered (n, ho, wo); columns (c, ki, kj) match the OIKK weight
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    w2 = weight.data.reshape(o, c * k * k)
    out = (cols @ w2.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape)
            for a in range(k):
                for b in range(k):
                    gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += gcols[
                        :, :, :, :, a, b
                    ].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return gx, gw, gb

    return make_result(out, (x, weight, bias), backward)


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Window max; gradient goes to the first maximal cell in row-major order."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d expects NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"maxpool2d: window {k} larger than input {h}x{w}")
    if k < 1 or stride < 1:
        raise ShapeError(f"maxpool2d: invalid k={k} stride={stride}")
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gx = np.zeros(x.shape)
        rows = (np.arange(ho) * stride)[None, None, :, None] + arg // k
        cols = (np.arange(wo) * stride)[None, None, None, :] + arg % k
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        if stride >= k:
            # windows are disjoint, so no index repeats
            gx[ni, ci, rows, cols] = g
        else:
            np.add.at(gx, (np.broadcast_to(ni, g.shape), np.broadcast_to(ci, g.shape), rows, cols), g)
        return (gx,)

    return make_result(out, (x,), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for x of shape N x D and weight D x M."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"linear expects 2-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[1]} does not match weight rows {weight.shape[0]}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data + bias.data

    def backward(g):
        return (
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
            g.sum(axis=0) if bias.requires_grad else None,
        )

    return make_result(out, (x, weight, bias), backward)


def flatten(x: Tensor) -> Tensor:
    src = x.shape
    return make_result(x.data.reshape(src[0], -1), (x,), lambda g: (g.reshape(src),))


def scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply every element by the single stored scalar ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"scale expects a single-element factor, got {s.shape}")
    sv = float(s.data.reshape(-1)[0])
    return make_result(
        x.data * sv,
        (x, s),
        lambda g: (g * sv, np.full(s.shape, float(np.sum(g * x.data)))),
    )


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over spatial dims: NCHW -> NC; 2-d inputs pass through."""
    if x.data.ndim == 2:
        return x
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW or NC input, got {x.shape}")
    hw = x.shape[2] * x.shape[3]
    src = x.shape
    return make_result(
        x.data.mean(axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / hw, src).copy(),),
    )


def _softmax_np(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax expects N x C input, got {x.shape}")
    p = _softmax_np(x.data)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return make_result(p, (x,), backward)


def cross_entropy_loss(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Batch-mean negative log-probability of the true class."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy_loss expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise ShapeError(f"cross_entropy_loss: {y.shape[0] if y.ndim else 0} labels for {n} rows")
    if n and (y.min() < 0 or y.max() >= c):
        raise ValueError(f"cross_entropy_loss: labels must lie in [0, {c}), got range [{y.min()}, {y.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    nll = logsum - shifted[rows, y]
    loss = np.array(nll.mean())

    def backward(g):
        p = _softmax_np(z)
        p[rows, y] -= 1.0
        return (p * (float(g) / n),)

    return make_result(loss, (logits,), backward)


def _check_match(x: Tensor, y: Tensor, who: str) -> None:
    if x.shape != y.shape:
        raise ShapeError(f"{who}: prediction shape {x.shape} differs from target shape {y.shape}")


def l2_match_loss(x: Tensor, y: Tensor) -> Tensor:
    """Per-sample squared euclidean distance, averaged over the batch.

    ``y`` is a target: no gradient is propagated into it.
    """
    _check_match(x, y, "l2_match_loss")
    b = x.shape[0]
    diff = x.data - y.data
    loss = np.array(np.sum(diff * diff) / b)
    return make_result(loss, (x,), lambda g: ((2.0 * float(g) / b) * diff,))


def sigmoid_match_loss(x: Tensor, y: Tensor, alpha: float = 1.0, tau: float = 0.0) -> Tensor:
    """Binary log-loss of ``sigmoid(alpha * x)`` against the indicator ``y > tau``.

    Summed over feature dims, averaged over the batch, negated so that it is
    minimised.
    """
    _check_match(x, y, "sigmoid_match_loss")
    if alpha <= 0:
        raise ValueError(f"sigmoid_match_loss: alpha must be positive, got {alpha}")
    b = x.shape[0]
    on = y.data > tau
    ax = alpha * x.data
    # -log p = softplus(-ax), -log(1-p) = softplus(ax)
    per = np.where(on, np.logaddexp(0.0, -ax), np.logaddexp(0.0, ax))
    loss = np.array(per.sum() / b)

    def backward(g):
        p = 0.5 * (1.0 + np.tanh(0.5 * ax))
        return ((alpha * float(g) / b) * (p - on),)

    return make_result(loss, (x,), backward)
