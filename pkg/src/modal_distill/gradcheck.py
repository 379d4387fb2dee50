"""Central finite-difference checks of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import ops
from .tensor import Tensor, tensor_sum, mul


def finite_diff_check(op: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between autodiff and central differences of ``op`` at ``x``.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    out = op(probe)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check needs a scalar-valued op, got shape {out.shape}")
    out.backward()
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for idx in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[idx] += eps
        f_plus = op(Tensor(bumped.reshape(base.shape))).item()
        bumped[idx] -= 2 * eps
        f_minus = op(Tensor(bumped.reshape(base.shape))).item()
        flat[idx] = (f_plus - f_minus) / (2 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return tensor_sum(mul(out, Tensor(w)))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    v = rng.uniform(margin, 1.0, size=shape)
    return v * rng.choice([-1.0, 1.0], size=shape)


def _distinct(rng: np.random.Generator, shape) -> np.ndarray:
    # well-separated values keep maxpool argmaxes stable under +-eps
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * 0.1 + rng.uniform(0, 0.01, n)).reshape(shape)


def kernel_cases(rng: np.random.Generator) -> dict[str, list[tuple[Callable[[Tensor], Tensor], Tensor]]]:
    """One random probe per kernel and differentiable argument."""
    cases: dict[str, list] = {}

    x = rng.normal(size=(2, 2, 5, 5))
    wt = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    R = rng.normal(size=(2, 3, 3, 3))  # stride 2, pad 1 -> 3x3
    conv = lambda xx, ww, bb: _weighted(ops.conv2d(xx, ww, bb, stride=2, pad=1), R)
    cases["conv2d"] = [
        (lambda t: conv(t, Tensor(wt), Tensor(b)), Tensor(x)),
        (lambda t: conv(Tensor(x), t, Tensor(b)), Tensor(wt)),
        (lambda t: conv(Tensor(x), Tensor(wt), t), Tensor(b)),
    ]

    xp = _distinct(rng, (2, 2, 5, 5))
    Rp = rng.normal(size=(2, 2, 2, 2))
    Ro = rng.normal(size=(2, 2, 3, 3))
    cases["maxpool2d"] = [
        (lambda t: _weighted(ops.maxpool2d(t, 2, 2), Rp), Tensor(xp)),
        (lambda t: _weighted(ops.maxpool2d(t, 3, 1), Ro), Tensor(xp)),
    ]

    Rr = rng.normal(size=(3, 4))
    cases["relu"] = [(lambda t: _weighted(ops.relu(t), Rr), Tensor(_away_from_zero(rng, (3, 4))))]

    xl = rng.normal(size=(3, 4))
    wl = rng.normal(size=(4, 2))
    bl = rng.normal(size=(2,))
    Rl = rng.normal(size=(3, 2))
    lin = lambda xx, ww, bb: _weighted(ops.linear(xx, ww, bb), Rl)
    cases["linear"] = [
        (lambda t: lin(t, Tensor(wl), Tensor(bl)), Tensor(xl)),
        (lambda t: lin(Tensor(xl), t, Tensor(bl)), Tensor(wl)),
        (lambda t: lin(Tensor(xl), Tensor(wl), t), Tensor(bl)),
    ]

    labels = rng.integers(0, 5, size=4)
    Rs = rng.normal(size=(4, 5))
    cases["softmax+cross_entropy"] = [
        (lambda t: ops.cross_entropy_loss(t, labels), Tensor(rng.normal(size=(4, 5)))),
        (lambda t: _weighted(ops.softmax(t), Rs), Tensor(rng.normal(size=(4, 5)))),
    ]

    target = rng.normal(size=(3, 2, 2, 2))
    cases["l2_match_loss"] = [(lambda t: ops.l2_match_loss(t, Tensor(target)), Tensor(rng.normal(size=target.shape)))]

    alpha = float(rng.uniform(0.5, 2.0))
    cases["sigmoid_match_loss"] = [
        (lambda t: ops.sigmoid_match_loss(t, Tensor(target), alpha=alpha, tau=0.0), Tensor(rng.normal(size=target.shape)))
    ]

    s = rng.normal(size=(1,))
    xs = rng.normal(size=(2, 3))
    Rsc = rng.normal(size=(2, 3))
    cases["scale"] = [
        (lambda t: _weighted(ops.scale(t, Tensor(s)), Rsc), Tensor(xs)),
        (lambda t: _weighted(ops.scale(Tensor(xs), t), Rsc), Tensor(s)),
    ]
    return cases


def check_all_kernels(seed: int = 0, probes: int = 3, eps: float = 1e-6) -> dict[str, float]:
    """Max relative error per kernel over ``probes`` independent random draws."""
    rng = np.random.default_rng(seed)
    worst: dict[str, float] = {}
    for _ in range(probes):
        for name, items in kernel_cases(rng).items():
            for op, x in items:
                err = finite_diff_check(op, x, eps)
                worst[name] = max(worst.get(name, 0.0), err)
    return worst
