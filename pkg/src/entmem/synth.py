"""Mock shot generator and keyframe scoring.

This is not a video model. It renders block-textured canvases so the bank
update loop and the metrics have something deterministic to chew on:
entities with memory are re-drawn from their stored latent patches (decoded,
jittered by whole patches, optionally mirrored); entities without memory get
a procedural ellipse seeded by their description; the background is seeded
by the scene description.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from entmem import codec, rng
from entmem.conditioning import RetrievedMemory
from entmem.errors import InvalidK
from entmem.script import Category, EntityId, Shot
from entmem.tensors import MemoryLayout

DRAW_ORDER = {Category.SCENE: 0, Category.OBJECT: 1, Category.CHARACTER: 2}


@dataclass(eq=False)
class SynthShot:
    frames: np.ndarray  # (n, H, W, 3) float32
    masks: dict[EntityId, np.ndarray] = field(default_factory=dict)  # (n, H, W) visible pixels


def _colors(seed: int, n: int, lo: float = 0.1, hi: float = 0.9) -> np.ndarray:
    return lo + (hi - lo) * rng.uniform(seed, 3 * n).reshape(n, 3)


def background(text: str, height: int, width: int, block: int = 8) -> np.ndarray:
    """Vertical two-colour gradient with block-level texture, seeded by ``text``."""
    s = rng.derive_seed(0, "background", text)
    top, bottom = _colors(s, 2, 0.15, 0.85)
    t = np.linspace(0.0, 1.0, height)[:, None, None]
    base = np.broadcast_to((1 - t) * top + t * bottom, (height, width, 3))
    tex = rng.uniform(rng.derive_seed(s, "tex"), (height // block) * (width // block))
    tex = (tex.reshape(height // block, width // block) - 0.5) * 0.12
    tex = np.repeat(np.repeat(tex, block, axis=0), block, axis=1)[..., None]
    return np.clip(base + tex, 0.0, 1.0).astype(np.float32)


def procedural_entity(entity: EntityId, description: str, height: int, width: int, block: int = 8):
    """Striped ellipse seeded by the entity's id and description: ``(rgb, mask)``."""
    s = rng.derive_seed(0, "entity", entity.raw, description)
    u = rng.uniform(s, 6)
    ry = height * (0.12 + 0.12 * u[0])
    rx = width * (0.10 + 0.12 * u[1])
    cy = ry + u[2] * (height - 2 * ry)
    cx = rx + u[3] * (width - 2 * rx)
    yy, xx = np.mgrid[0:height, 0:width]
    mask = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    c1, c2 = _colors(rng.derive_seed(s, "color"), 2)
    stripe = ((yy // (2 * block)) % 2 == 0)[..., None]
    rgb = np.where(stripe, c1, 0.7 * c1 + 0.3 * c2).astype(np.float32)
    return rgb, mask


def _paste_patches(canvas, mask, coords, values, layout, stride, seed, dx, dy, mirror):
    fh, fw = layout.ph * stride, layout.pw * stride
    xs = coords[:, 0].copy()
    if mirror:
        xs = xs.min() + xs.max() - xs
    xs += dx
    ys = coords[:, 1] + dy
    for x, y, block in zip(xs, ys, values):
        tile = codec.vae_decode(block.astype(np.float64), stride, seed)
        if mirror:
            tile = tile[:, ::-1]
        canvas[y * fh : (y + 1) * fh, x * fw : (x + 1) * fw] = np.clip(tile, 0.0, 1.0)
        mask[y * fh : (y + 1) * fh, x * fw : (x + 1) * fw] = True


def _jitter(coords: np.ndarray, layout: MemoryLayout, limit: int, seed: int) -> tuple[int, int]:
    d = rng.splitmix64(seed, 2) % np.uint64(2 * limit + 1)
    dx, dy = int(d[0]) - limit, int(d[1]) - limit
    dx = int(np.clip(dx, -coords[:, 0].min(), layout.grid_w - 1 - coords[:, 0].max()))
    dy = int(np.clip(dy, -coords[:, 1].min(), layout.grid_h - 1 - coords[:, 1].max()))
    return dx, dy


def mock_shot_synthesizer(
    shot: Shot,
    retrieved: RetrievedMemory,
    descriptions: dict[EntityId, str],
    layout: MemoryLayout,
    seed: int,
    n_frames: int = 8,
    stride: int = 8,
    jitter: int = 2,
    codec_seed: int = codec.DEFAULT_SEED,
) -> SynthShot:
    refs = shot.entity_refs
    height, width = layout.h * stride, layout.w * stride
    scene_text = " / ".join(descriptions[r] for r in refs if r.is_scene) or shot.natural_prompt
    canvas = background(scene_text, height, width, stride).copy()

    by_entity: dict[EntityId, list[int]] = {}
    for slot, (eid, _) in enumerate(retrieved.slot_keys):
        by_entity.setdefault(eid, []).append(slot)
    patches = retrieved.patches

    shot_seed = rng.derive_seed(seed, "shot", shot.shot_num)
    visible: dict[EntityId, np.ndarray] = {}
    for eid in sorted(refs, key=lambda e: (DRAW_ORDER[e.category], e.raw)):
        ent_seed = rng.derive_seed(shot_seed, eid.raw)
        drawn = np.zeros((height, width), dtype=bool)
        slots = by_entity.get(eid)
        if slots:
            pick = slots[int(rng.splitmix64(ent_seed, 1)[0] % np.uint64(len(slots)))]
            sel = patches.slots == pick
            coords, values = patches.coords[sel], patches.values[sel]
            if eid.is_scene:
                dx = dy = 0
                mirror = False
            else:
                dx, dy = _jitter(coords, layout, jitter, rng.derive_seed(ent_seed, "jitter"))
                mirror = bool(rng.splitmix64(rng.derive_seed(ent_seed, "mirror"), 1)[0] & np.uint64(1))
            _paste_patches(canvas, drawn, coords, values, layout, stride, codec_seed, dx, dy, mirror)
        elif not eid.is_scene:
            rgb, drawn = procedural_entity(eid, descriptions.get(eid, eid.raw), height, width, stride)
            canvas[drawn] = rgb[drawn]
        if eid.is_scene:
            continue
        for other in visible.values():
            other &= ~drawn
        visible[eid] = drawn

    frames = np.empty((n_frames, height, width, 3), dtype=np.float32)
    for f in range(n_frames):
        amp = 0.004 * (1 + (f * 7 + shot.shot_num) % 5)
        grain = rng.normal(rng.derive_seed(shot_seed, "grain", f), canvas.size).reshape(canvas.shape)
        frames[f] = np.clip(canvas + amp * grain, 0.0, 1.0)
    masks = {eid: np.broadcast_to(m, (n_frames, height, width)).copy() for eid, m in visible.items() if m.any()}
    return SynthShot(frames, masks)


def laplacian_variance(frame: np.ndarray) -> float:
    """Variance of the 4-neighbour Laplacian of the grey image (sharpness proxy)."""
    g = np.asarray(frame, dtype=np.float64).mean(axis=2)
    lap = g[:-2, 1:-1] + g[2:, 1:-1] + g[1:-1, :-2] + g[1:-1, 2:] - 4.0 * g[1:-1, 1:-1]
    return float(lap.var())


def select_keyframes(frames, k: int, scorer=laplacian_variance) -> list[int]:
    """Top-``k`` frame indices by score, ties to the lower index."""
    if not 0 <= k <= len(frames):
        raise InvalidK(f"k={k} for {len(frames)} frames")
    scores = [scorer(f) for f in frames]
    order = sorted(range(len(frames)), key=lambda i: (-scores[i], i))
    return order[:k]
