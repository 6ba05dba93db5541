"""Deterministic stand-ins for the video VAE and the patchify convolution.

Both are local linear maps: a latent cell depends only on its own
``stride x stride`` pixel block, and a token only on its own
``C x p_h x p_w`` latent patch. All projections accumulate in a fixed
per-element order, so a token computed on its own is bit-identical to the
same token computed inside a dense grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from entmem import rng
from entmem.errors import DimensionMismatch
from entmem.tensors import MemoryLayout, PatchSet

DEFAULT_SEED = 20240611


@dataclass(eq=False)
class TokenGrid:
    """Dense token sequence in canonical slot-major, row-major order."""

    layout: MemoryLayout
    tokens: np.ndarray  # (layout.n_tokens, D)

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or len(self.tokens) != self.layout.n_tokens:
            raise DimensionMismatch(
                f"{self.tokens.shape[0] if self.tokens.ndim else 0} tokens for layout with {self.layout.n_tokens}"
            )

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.layout, self.tokens.copy())


def _project(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Row-wise ``x @ matrix`` with a fixed accumulation order per element.

    BLAS gemm may reorder sums depending on the batch size; this loop keeps
    every output element's rounding independent of the other rows.
    """
    out = x[:, 0:1] * matrix[0]
    for k in range(1, matrix.shape[0]):
        out += x[:, k : k + 1] * matrix[k]
    return out


def _hadamard(n: int) -> np.ndarray:
    h = np.ones((1, 1))
    while h.shape[0] < n:
        h = np.block([[h, h], [h, -h]])
    return h


@lru_cache(maxsize=64)
def vae_matrix(channels: int, seed: int) -> np.ndarray:
    """``channels x 3`` map from RGB block means to latent channels.

    For power-of-two ``channels >= 4`` this is a seeded signed selection of
    scaled Hadamard columns; its entries are powers of two, so encode/decode
    round trips are exact. Other channel counts fall back to Gram-Schmidt.
    """
    if channels < 3:
        raise ValueError("need at least 3 latent channels to keep RGB invertible")
    sub = rng.derive_seed(seed, "vae", channels)
    if channels >= 4 and channels & (channels - 1) == 0:
        h = _hadamard(channels) / np.sqrt(channels)
        draws = rng.splitmix64(sub, 2 * channels + 2)
        rows = np.argsort(draws[:channels], kind="stable")
        # columns drawn from 1..C-1; column 0 is constant
        cols = 1 + np.argsort(draws[channels : 2 * channels - 1], kind="stable")[:3]
        signs = np.where(draws[2 * channels - 1 :] & np.uint64(1), -1.0, 1.0)
        mat = h[rows][:, cols] * signs
    else:
        mat = rng.orthonormal_columns(channels, 3, sub)
    mat.setflags(write=False)
    return mat


@lru_cache(maxsize=64)
def patch_matrix(patch_dim: int, seed: int) -> np.ndarray:
    """Orthonormal ``patch_dim x patch_dim`` token projection (inverse = transpose)."""
    mat = rng.orthonormal_columns(patch_dim, patch_dim, rng.derive_seed(seed, "patchify", patch_dim))
    mat.setflags(write=False)
    return mat


def _block_means(frame: np.ndarray, stride: int) -> np.ndarray:
    h, w = frame.shape[0] // stride, frame.shape[1] // stride
    acc = np.zeros((h, w, frame.shape[2]), dtype=np.float64)
    for dy in range(stride):
        for dx in range(stride):
            acc += frame[dy::stride, dx::stride]
    return acc / (stride * stride)


def vae_encode(frame: np.ndarray, stride: int = 8, channels: int = 4, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Encode an ``(H, W, 3)`` frame to a ``(C, H/stride, W/stride)`` latent."""
    frame = np.asarray(frame, dtype=np.float32)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise DimensionMismatch(f"frame must be (H, W, 3), got {frame.shape}")
    if frame.shape[0] % stride or frame.shape[1] % stride:
        raise DimensionMismatch(f"frame {frame.shape[:2]} not divisible by stride {stride}")
    means = _block_means(frame.astype(np.float64), stride)
    mat = vae_matrix(channels, seed)
    h, w = means.shape[:2]
    latent = _project(means.reshape(-1, 3), mat.T)
    return latent.T.reshape(channels, h, w)


def vae_decode(latent: np.ndarray, stride: int = 8, seed: int = DEFAULT_SEED) -> np.ndarray:
    """Block-constant frame whose block means re-encode to ``latent``'s range projection."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise DimensionMismatch(f"latent must be (C, H, W), got {latent.shape}")
    c, h, w = latent.shape
    mat = vae_matrix(c, seed)
    means = _project(latent.reshape(c, -1).T, mat).reshape(h, w, 3)
    return np.repeat(np.repeat(means, stride, axis=0), stride, axis=1).astype(np.float32)


def latent_to_patches(dense: np.ndarray, layout: MemoryLayout) -> np.ndarray:
    """``(M, C, H, W)`` -> ``(M * gh * gw, C * ph * pw)`` in canonical order."""
    dense = np.asarray(dense)
    lay = layout
    if dense.shape != (lay.m, lay.c, lay.h, lay.w):
        raise DimensionMismatch(f"dense latent {dense.shape} does not match {lay}")
    x = dense.reshape(lay.m, lay.c, lay.grid_h, lay.ph, lay.grid_w, lay.pw)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(-1, lay.patch_dim)


def patches_to_latent(flat: np.ndarray, layout: MemoryLayout) -> np.ndarray:
    lay = layout
    x = np.asarray(flat).reshape(lay.m, lay.grid_h, lay.grid_w, lay.c, lay.ph, lay.pw)
    return x.transpose(0, 3, 1, 4, 2, 5).reshape(lay.m, lay.c, lay.h, lay.w)


def patchify(dense: np.ndarray, layout: MemoryLayout, seed: int = DEFAULT_SEED) -> TokenGrid:
    flat = latent_to_patches(dense, layout).astype(np.float64)
    return TokenGrid(layout, _project(flat, patch_matrix(layout.patch_dim, seed)))


def unpatchify(grid: TokenGrid, seed: int = DEFAULT_SEED) -> np.ndarray:
    lay = grid.layout
    if grid.dim != lay.patch_dim:
        raise DimensionMismatch(f"token width {grid.dim} != patch dim {lay.patch_dim}")
    flat = _project(grid.tokens, patch_matrix(lay.patch_dim, seed).T)
    return patches_to_latent(flat, lay)


def sparse_patchify_direct(patches: PatchSet, seed: int = DEFAULT_SEED) -> tuple[np.ndarray, np.ndarray]:
    """Tokenize stored patches without building the dense grid.

    Returns ``(positions, tokens)`` sorted by canonical position.
    """
    lay = patches.layout
    pos = patches.positions()
    order = np.argsort(pos, kind="stable")
    flat = patches.values[order].reshape(len(order), lay.patch_dim).astype(np.float64)
    tokens = _project(flat, patch_matrix(lay.patch_dim, seed)) if len(order) else np.zeros((0, lay.patch_dim))
    return pos[order], tokens


def sparse_unpatchify_direct(
    positions: np.ndarray, tokens: np.ndarray, layout: MemoryLayout, seed: int = DEFAULT_SEED
) -> np.ndarray:
    """Inverse of :func:`sparse_patchify_direct`: per-token latent blocks ``(n, C, ph, pw)``."""
    tokens = np.asarray(tokens, dtype=np.float64).reshape(len(positions), -1)
    flat = _project(tokens, patch_matrix(layout.patch_dim, seed).T) if len(tokens) else np.zeros((0, layout.patch_dim))
    return flat.reshape(-1, layout.c, layout.ph, layout.pw)
