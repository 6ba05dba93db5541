"""Pixel-space noise injection before encoding.

Two uses: noising everything outside an entity's mask so boundary patches
do not carry background into later shots, and noising a modification
region (e.g. a garment that should change) while dropping the patches that
lie entirely inside it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from entmem import codec, rng
from entmem.bank import BankConfig, DescriptorProvider, EntityEntry, Origin, build_entry
from entmem.errors import DimensionMismatch, EmptyResult
from entmem.script import EntityId
from entmem.tensors import patch_footprint

DEFAULT_SIGMA = 0.25


class MaskContainmentWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    sigma: float
    seed: int
    region: np.ndarray

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def inject_noise(frame: np.ndarray, spec: NoiseSpec) -> np.ndarray:
    """Add seeded N(0, sigma^2) noise inside ``spec.region`` and clamp to [0, 1].

    The noise field is drawn for the whole frame (row-major, channel-last)
    so a pixel's sample does not depend on the shape of the region.
    """
    frame = np.asarray(frame, dtype=np.float32)
    region = np.asarray(spec.region, dtype=bool)
    if region.shape != frame.shape[:2]:
        raise DimensionMismatch(f"region {region.shape} vs frame {frame.shape[:2]}")
    if spec.sigma == 0 or not region.any():
        return frame.copy()
    noise = rng.normal(spec.seed, frame.size).reshape(frame.shape)
    noised = np.clip(frame.astype(np.float64) + spec.sigma * noise, 0.0, 1.0).astype(np.float32)
    return np.where(region[..., None], noised, frame)


def background_suppressed_entry(
    frame: np.ndarray,
    entity_mask: np.ndarray,
    entity: EntityId,
    description: str,
    frame_index: int,
    provider: DescriptorProvider,
    config: BankConfig,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
    origin: Origin = Origin(),
) -> EntityEntry:
    entity_mask = np.asarray(entity_mask, dtype=bool)
    noised = inject_noise(frame, NoiseSpec(sigma, seed, ~entity_mask))
    return build_entry(noised, entity_mask, entity, description, frame_index, provider, config, origin)


def fully_inside(coords: np.ndarray, region: np.ndarray, config: BankConfig) -> np.ndarray:
    """Per patch: is every pixel of its footprint inside ``region``?"""
    out = np.zeros(len(coords), dtype=bool)
    for i, (x, y) in enumerate(coords):
        rows, cols = patch_footprint(int(x), int(y), config.layout, config.vae_stride)
        out[i] = region[rows, cols].all()
    return out


def attribute_edit_entry(
    entry: EntityEntry,
    source_frame: np.ndarray,
    entity_mask: np.ndarray,
    modification_mask: np.ndarray,
    config: BankConfig,
    sigma: float = DEFAULT_SIGMA,
    seed: int = 0,
) -> EntityEntry:
    """Drop patches inside the modification region; re-encode the rest with it noised.

    Descriptors are carried over from ``entry``; ``token_cost`` follows the
    remaining patch count.
    """
    source_frame = np.asarray(source_frame, dtype=np.float32)
    entity_mask = np.asarray(entity_mask, dtype=bool)
    modification_mask = np.asarray(modification_mask, dtype=bool)
    if modification_mask.shape != source_frame.shape[:2] or entity_mask.shape != modification_mask.shape:
        raise DimensionMismatch("masks must match the source frame")
    stray = modification_mask & ~entity_mask
    if stray.any():
        warnings.warn(
            f"{int(stray.sum())} modification pixels lie outside the entity mask of {entry.entity}",
            MaskContainmentWarning,
            stacklevel=2,
        )
    if not modification_mask.any():
        return replace(entry)

    keep = ~fully_inside(entry.coords, modification_mask, config)
    if not keep.any():
        raise EmptyResult(f"edit removes every patch of {entry.entity} entry {entry.entry_index}")
    noised = inject_noise(source_frame, NoiseSpec(sigma, seed, modification_mask))
    lay = config.layout
    latent = codec.vae_encode(noised, config.vae_stride, lay.c, config.codec_seed)
    blocks = latent.reshape(lay.c, lay.grid_h, lay.ph, lay.grid_w, lay.pw).transpose(1, 3, 0, 2, 4)
    coords = entry.coords[keep]
    return replace(entry, coords=coords, values=blocks[coords[:, 1], coords[:, 0]].astype(np.float32))
