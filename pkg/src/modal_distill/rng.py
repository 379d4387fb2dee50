"""Named, counter-based random streams.

Every random draw in the package comes from Philox4x64-10 (numpy's
``Philox`` bit generator) keyed by the 128-bit pair ``(seed, fnv1a64(stream))``
with the counter starting at zero. ``stream`` is a string such as
``"init/conv1"`` or ``"batches/3"``, so draws for one purpose never depend on
how many draws another purpose made.

Weight initialisation avoids numpy's distribution samplers so that it can be
reproduced from the raw stream alone:

    u   = (raw_u64 >> 11) * 2**-53            uniform in [0, 1)
    z0  = sqrt(-2 ln(1 - u1)) * cos(2 pi u2)  Box-Muller, consecutive pairs
    z1  = sqrt(-2 ln(1 - u1)) * sin(2 pi u2)
"""

from __future__ import annotations

import numpy as np

STREAM_VERSION = "philox4x64-10/fnv1a64-key/v1"

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a64_py(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    _fnv1a64_bulk = None
else:

    @numba.njit(cache=True)
    def _fnv1a64_nb(buf):
        h = np.uint64(_FNV_OFFSET)
        p = np.uint64(_FNV_PRIME)
        for i in range(buf.shape[0]):
            h = (h ^ np.uint64(buf[i])) * p
        return h

    def _fnv1a64_bulk(data: bytes) -> int:
        return int(_fnv1a64_nb(np.frombuffer(data, dtype=np.uint8)))


_BULK_THRESHOLD = 1 << 16


def fnv1a64(data: bytes | str) -> int:
    """64-bit FNV-1a; large buffers go through a compiled loop when numba is installed."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    if _fnv1a64_bulk is not None and len(data) >= _BULK_THRESHOLD:
        return _fnv1a64_bulk(bytes(data))
    return _fnv1a64_py(data)


def bit_generator(seed: int, stream: str) -> np.random.Philox:
    key = (int(seed) & _MASK64) | (fnv1a64(stream) << 64)
    return np.random.Philox(key=key)


def generator(seed: int, stream: str) -> np.random.Generator:
    return np.random.Generator(bit_generator(seed, stream))


def uniforms(seed: int, stream: str, n: int) -> np.ndarray:
    raw = bit_generator(seed, stream).random_raw(n).astype(np.uint64)
    return (raw >> np.uint64(11)).astype(np.float64) * (2.0**-53)


def normals(seed: int, stream: str, n: int) -> np.ndarray:
    """``n`` standard normal draws via Box-Muller on the raw stream."""
    pairs = (n + 1) // 2
    u = uniforms(seed, stream, 2 * pairs).reshape(pairs, 2)
    r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    theta = 2.0 * np.pi * u[:, 1]
    z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1).reshape(-1)
    return z[:n]
