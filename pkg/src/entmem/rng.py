"""Counter-based splitmix64 generator.

Every seeded quantity in the package (projection maps, attention weights,
pixel noise, jitter) is drawn from this generator so that results are
bit-identical across platforms. Draw ``i`` of a stream seeded with ``s`` is
``mix(s + (i + 1) * GOLDEN)``, which is exactly the i-th output of the
sequential splitmix64 algorithm; the counter form lets numpy vectorize it.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Return ``n`` raw 64-bit outputs of the stream, starting at draw ``offset``."""
    counters = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK) + counters * np.uint64(GOLDEN)
        return _mix(state)


def uniform(seed: int, n: int, offset: int = 0) -> np.ndarray:
    """Doubles in [0, 1) built from the top 53 bits of each draw."""
    return (splitmix64(seed, n, offset) >> np.uint64(11)).astype(np.float64) * 2.0**-53


def normal(seed: int, n: int) -> np.ndarray:
    """Standard normal samples via Box-Muller (both branches used).

    Pair ``k`` consumes uniforms ``2k`` and ``2k+1``; output ``2k`` is the
    cosine branch and ``2k+1`` the sine branch.
    """
    pairs = (n + 1) // 2
    u = uniform(seed, 2 * pairs)
    u1 = 1.0 - u[0::2]  # (0, 1], keeps log finite
    u2 = u[1::2]
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * math.pi * u2
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:n]


def derive_seed(seed: int, *labels: object) -> int:
    """Deterministic child seed for a named sub-stream."""
    h = hashlib.blake2b(digest_size=8)
    h.update((seed & _MASK).to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def orthonormal_columns(n_rows: int, n_cols: int, seed: int) -> np.ndarray:
    """Seeded ``n_rows x n_cols`` matrix with orthonormal columns.

    Modified Gram-Schmidt on a Gaussian matrix. Dot products use ``math.fsum``
    (correctly rounded) so the result does not depend on the BLAS build.
    """
    if n_cols > n_rows:
        raise ValueError(f"cannot build {n_cols} orthonormal columns in R^{n_rows}")
    raw = normal(seed, n_rows * n_cols).reshape(n_rows, n_cols)
    q = np.zeros((n_rows, n_cols), dtype=np.float64)
    for j in range(n_cols):
        v = raw[:, j].copy()
        for i in range(j):
            r = math.fsum(q[:, i] * v)
            v = v - r * q[:, i]
        norm = math.sqrt(math.fsum(v * v))
        if norm < 1e-12:
            raise ArithmeticError("degenerate random matrix; choose another seed")
        q[:, j] = v / norm
    return q
