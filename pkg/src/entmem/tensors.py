"""Latent layouts, mask algebra, and the binary tensor/mask file formats.

Frames are ``(H, W, 3)`` float32 arrays in [0, 1]; latents are ``(C, H, W)``
arrays; pixel masks are ``(H, W)`` bool arrays. Patch masks are bool arrays
over the patch grid, ``(H/p_h, W/p_w)`` per memory slot.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from entmem.errors import (
    CoordinateOutOfRange,
    DimensionMismatch,
    DuplicateCoordinate,
    FormatError,
    VersionMismatch,
)

TENSOR_MAGIC = b"EMVT"
MASK_MAGIC = b"EMVM"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MemoryLayout:
    """Shape of the stacked memory latent: ``m`` slots of ``c x h x w``."""

    m: int = 1
    c: int = 4
    h: int = 32
    w: int = 32
    ph: int = 2
    pw: int = 2

    def __post_init__(self):
        if self.m < 0 or min(self.c, self.h, self.w, self.ph, self.pw) < 1:
            raise ValueError(f"invalid layout {self}")
        if self.h % self.ph or self.w % self.pw:
            raise DimensionMismatch(f"patch {self.ph}x{self.pw} does not divide latent {self.h}x{self.w}")

    @property
    def grid_h(self) -> int:
        return self.h // self.ph

    @property
    def grid_w(self) -> int:
        return self.w // self.pw

    @property
    def tokens_per_slot(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def n_tokens(self) -> int:
        return self.m * self.tokens_per_slot

    @property
    def patch_dim(self) -> int:
        return self.c * self.ph * self.pw

    def with_slots(self, m: int) -> "MemoryLayout":
        return MemoryLayout(m, self.c, self.h, self.w, self.ph, self.pw)

    def token_index(self, slot, x, y):
        """Canonical position of patch ``(x, y)`` (column, row) in ``slot``."""
        return (np.asarray(slot) * self.grid_h + np.asarray(y)) * self.grid_w + np.asarray(x)


@dataclass(eq=False)
class PatchSet:
    """Unstructured set of latent patches placed in memory slots.

    ``coords`` holds ``(x, y)`` = (patch column, patch row) per item and
    ``values`` the ``C x p_h x p_w`` latent block underlying each patch.
    """

    layout: MemoryLayout
    slots: np.ndarray
    coords: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.slots = np.asarray(self.slots, dtype=np.int64).reshape(-1)
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        lay = self.layout
        self.values = np.asarray(self.values, dtype=np.float32).reshape(-1, lay.c, lay.ph, lay.pw)
        if not (len(self.slots) == len(self.coords) == len(self.values)):
            raise DimensionMismatch("slots, coords and values have different lengths")

    def __len__(self) -> int:
        return len(self.slots)

    @classmethod
    def empty(cls, layout: MemoryLayout) -> "PatchSet":
        return cls(layout, np.zeros(0), np.zeros((0, 2)), np.zeros((0, layout.c, layout.ph, layout.pw)))

    def positions(self) -> np.ndarray:
        """Canonical token index of every item (checks ranges first)."""
        lay = self.layout
        if len(self):
            x, y = self.coords[:, 0], self.coords[:, 1]
            bad = (
                (self.slots < 0) | (self.slots >= lay.m)
                | (x < 0) | (x >= lay.grid_w) | (y < 0) | (y >= lay.grid_h)
            )
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise CoordinateOutOfRange(
                    f"item {i}: slot {self.slots[i]}, coord {tuple(self.coords[i])} outside {lay}"
                )
        return lay.token_index(self.slots, self.coords[:, 0], self.coords[:, 1]).astype(np.int64)

    def check_unique(self) -> np.ndarray:
        pos = self.positions()
        uniq, counts = np.unique(pos, return_counts=True)
        if (counts > 1).any():
            dup = int(uniq[counts > 1][0])
            i = int(np.flatnonzero(pos == dup)[0])
            raise DuplicateCoordinate(f"slot {self.slots[i]} coord {tuple(self.coords[i])} appears twice")
        return pos


def _check_same_shape(masks: Sequence[np.ndarray]) -> tuple[int, ...]:
    shapes = {np.shape(m) for m in masks}
    if len(shapes) > 1:
        raise DimensionMismatch(f"mask shapes differ: {sorted(shapes)}")
    return shapes.pop()


def union_masks(masks: Sequence[np.ndarray]) -> np.ndarray:
    if not masks:
        raise ValueError("union of zero masks has no shape; pass dims via scene_complement")
    _check_same_shape(masks)
    out = np.zeros(np.shape(masks[0]), dtype=bool)
    for m in masks:
        out |= np.asarray(m, dtype=bool)
    return out


def scene_complement(foreground_masks: Sequence[np.ndarray], dims: tuple[int, int]) -> np.ndarray:
    """Background region: pixels not covered by any foreground mask."""
    if not foreground_masks:
        return np.ones(dims, dtype=bool)
    shape = _check_same_shape(foreground_masks)
    if tuple(shape) != tuple(dims):
        raise DimensionMismatch(f"masks are {shape}, expected {tuple(dims)}")
    return ~union_masks(foreground_masks)


def downsample_mask(
    mask: np.ndarray,
    layout: MemoryLayout,
    vae_stride: int = 8,
    overlap_threshold: float = 0.0,
) -> np.ndarray:
    """Patch-grid mask: a cell is set iff its covered-pixel fraction exceeds the threshold."""
    mask = np.asarray(mask, dtype=bool)
    fh, fw = layout.ph * vae_stride, layout.pw * vae_stride
    expected = (layout.h * vae_stride, layout.w * vae_stride)
    if mask.shape != expected:
        raise DimensionMismatch(f"mask is {mask.shape}, layout needs {expected}")
    counts = mask.reshape(layout.grid_h, fh, layout.grid_w, fw).sum(axis=(1, 3))
    # compare counts, not fractions: count / area would round at the threshold
    return counts > overlap_threshold * (fh * fw)


def patch_footprint(x: int, y: int, layout: MemoryLayout, vae_stride: int) -> tuple[slice, slice]:
    """Pixel rows/cols covered by patch ``(x, y)``."""
    fh, fw = layout.ph * vae_stride, layout.pw * vae_stride
    return slice(y * fh, (y + 1) * fh), slice(x * fw, (x + 1) * fw)


# -- file formats -----------------------------------------------------------


def _header(magic: bytes, shape: tuple[int, ...]) -> bytes:
    return magic + struct.pack(f"<HH{len(shape)}I", FORMAT_VERSION, len(shape), *shape)


def _parse_header(buf: bytes, magic: bytes) -> tuple[tuple[int, ...], int]:
    if len(buf) < 8:
        raise FormatError("file too short for header")
    if buf[:4] != magic:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {magic!r}")
    version, rank = struct.unpack_from("<HH", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, supported {FORMAT_VERSION}")
    end = 8 + 4 * rank
    if len(buf) < end:
        raise FormatError("truncated dims")
    return tuple(struct.unpack_from(f"<{rank}I", buf, 8)), end


def tensor_to_bytes(tensor: np.ndarray) -> bytes:
    arr = np.asarray(tensor)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor has non-finite values")
    return _header(TENSOR_MAGIC, arr.shape) + arr.astype("<f4").tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    shape, start = _parse_header(buf, TENSOR_MAGIC)
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != start + 4 * n:
        raise FormatError(f"payload is {len(buf) - start} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=start).astype(np.float32).reshape(shape)


def mask_to_bytes(mask: np.ndarray) -> bytes:
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim == 0:
        raise ValueError("mask must have rank >= 1")
    packed = np.packbits(arr, axis=-1, bitorder="big")
    return _header(MASK_MAGIC, arr.shape) + packed.tobytes(order="C")


def mask_from_bytes(buf: bytes) -> np.ndarray:
    shape, start = _parse_header(buf, MASK_MAGIC)
    if not shape:
        raise FormatError("mask must have rank >= 1")
    row_bytes = (shape[-1] + 7) // 8
    rows = int(np.prod(shape[:-1], dtype=np.int64))
    if len(buf) != start + rows * row_bytes:
        raise FormatError("mask payload length does not match dims")
    packed = np.frombuffer(buf, dtype=np.uint8, offset=start).reshape(*shape[:-1], row_bytes)
    return np.unpackbits(packed, axis=-1, count=shape[-1], bitorder="big").astype(bool)


def write_tensor(path, tensor: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(tensor))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_mask(path, mask: np.ndarray) -> None:
    Path(path).write_bytes(mask_to_bytes(mask))


def read_mask(path) -> np.ndarray:
    return mask_from_bytes(Path(path).read_bytes())
