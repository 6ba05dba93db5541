"""Inference-time sparse memory conditioning.

Retrieved entity patches are scattered into a zero-filled dense memory
latent, patchified, and pruned to the tokens of entity-bearing patches.
A one-layer seeded attention block stands in for the diffusion transformer:
target tokens attend over the kept memory tokens plus themselves. Target
predictions are scattered back into the dense token layout and
unpatchified; only the noisy target channels change between steps.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from entmem import codec, rng
from entmem.bank import EntityBank
from entmem.codec import TokenGrid
from entmem.errors import CountMismatch, DimensionMismatch, LengthMismatch
from entmem.script import EntityId
from entmem.tensors import MemoryLayout, PatchSet


class UnknownEntityWarning(UserWarning):
    pass


@dataclass(eq=False)
class RetrievedMemory:
    patches: PatchSet
    slot_keys: list[tuple[EntityId, int]]  # (entity, entry_index) per slot
    slot_costs: list[int]
    missing: list[EntityId] = field(default_factory=list)

    @property
    def n_slots(self) -> int:
        return len(self.slot_keys)


def retrieve_memory(bank: EntityBank, entity_ids: list[EntityId]) -> RetrievedMemory:
    """Collect every stored entry of the requested entities, one slot per entry.

    Slots are ordered by entity id, then entry index. Patch coordinates keep
    their source-frame positions.
    """
    wanted = []
    missing = []
    for eid in dict.fromkeys(entity_ids):
        if eid in bank:
            wanted.append(eid)
        else:
            missing.append(eid)
            warnings.warn(f"{eid} is not in the entity bank; skipped", UnknownEntityWarning, stacklevel=2)

    entries = [e for eid in sorted(wanted) for e in bank.entries[eid]]
    layout = bank.config.layout.with_slots(len(entries))
    if not entries:
        return RetrievedMemory(PatchSet.empty(layout), [], [], missing)
    slots = np.concatenate([np.full(e.token_cost, k) for k, e in enumerate(entries)])
    patches = PatchSet(
        layout,
        slots,
        np.concatenate([e.coords for e in entries]),
        np.concatenate([e.values for e in entries]),
    )
    return RetrievedMemory(
        patches,
        [(e.entity, e.entry_index) for e in entries],
        [e.token_cost for e in entries],
        missing,
    )


def scatter_to_dense(patches: PatchSet) -> tuple[np.ndarray, np.ndarray]:
    """Zero-filled ``(M, C, H, W)`` latent plus the ``(M, gh, gw)`` patch mask."""
    lay = patches.layout
    patches.check_unique()
    dense = np.zeros((lay.m, lay.grid_h, lay.grid_w, lay.c, lay.ph, lay.pw), dtype=np.float32)
    mask = np.zeros((lay.m, lay.grid_h, lay.grid_w), dtype=bool)
    x, y = patches.coords[:, 0], patches.coords[:, 1]
    dense[patches.slots, y, x] = patches.values
    mask[patches.slots, y, x] = True
    return dense.transpose(0, 3, 1, 4, 2, 5).reshape(lay.m, lay.c, lay.h, lay.w), mask


def gather_from_dense(dense: np.ndarray, patch_mask: np.ndarray, layout: MemoryLayout) -> PatchSet:
    """Inverse of :func:`scatter_to_dense` on the masked cells, canonical order."""
    slots, ys, xs = np.nonzero(patch_mask)
    blocks = dense.reshape(layout.m, layout.c, layout.grid_h, layout.ph, layout.grid_w, layout.pw)
    blocks = blocks.transpose(0, 2, 4, 1, 3, 5)
    return PatchSet(layout, slots, np.stack([xs, ys], axis=1), blocks[slots, ys, xs])


def prune_tokens(grid: TokenGrid, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Keep tokens where ``mask`` is set: ``(positions, tokens)`` in canonical order."""
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(mask) != len(grid.tokens):
        raise LengthMismatch(f"mask has {len(mask)} entries for {len(grid.tokens)} tokens")
    pos = np.flatnonzero(mask)
    return pos, grid.tokens[pos]


def scatter_tokens_back(predictions: np.ndarray, mask: np.ndarray, fill: TokenGrid) -> TokenGrid:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(mask) != len(fill.tokens):
        raise LengthMismatch(f"mask has {len(mask)} entries for {len(fill.tokens)} tokens")
    if len(predictions) != int(mask.sum()):
        raise CountMismatch(f"{len(predictions)} predictions for {int(mask.sum())} masked positions")
    out = fill.copy()
    out.tokens[mask] = predictions
    return out


# -- mock transformer -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray


@lru_cache(maxsize=16)
def attention_weights(dim: int, seed: int) -> AttentionWeights:
    mats = []
    for name in ("q", "k", "v", "o"):
        m = rng.normal(rng.derive_seed(seed, "attn", name, dim), dim * dim).reshape(dim, dim) / np.sqrt(dim)
        m.setflags(write=False)
        mats.append(m)
    return AttentionWeights(*mats)


def mock_dit_step(memory_tokens: np.ndarray, target_tokens: np.ndarray, seed: int = codec.DEFAULT_SEED) -> np.ndarray:
    """Single-head attention: targets attend over ``memory ∪ targets``.

    Returns one prediction per target token (residual + attention output).
    Tokens not passed in cannot influence the result.
    """
    target = np.asarray(target_tokens, dtype=np.float64)
    memory = np.asarray(memory_tokens, dtype=np.float64)
    if target.ndim != 2:
        raise DimensionMismatch("target tokens must be (n, D)")
    dim = target.shape[1]
    if memory.size == 0:
        memory = memory.reshape(0, dim)
    if memory.ndim != 2 or memory.shape[1] != dim:
        raise DimensionMismatch(f"memory tokens {memory.shape} do not have width {dim}")
    w = attention_weights(dim, seed)
    context = np.concatenate([memory, target], axis=0)
    scores = (target @ w.q) @ (context @ w.k).T / np.sqrt(dim)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return target + (weights @ (context @ w.v)) @ w.o


# -- denoising loop ---------------------------------------------------------


@dataclass(eq=False)
class ConditioningState:
    """Channel/time-wise conditioning for one shot.

    ``z_mask`` has one flag per slot of the stacked layout (memory slots
    first, then target slots): True marks clean conditioning.
    """

    z_t: TokenGrid
    z_mask: np.ndarray
    z_c_positions: np.ndarray
    z_c: np.ndarray
    token_mask: np.ndarray
    memory_layout: MemoryLayout

    def __post_init__(self):
        for arr in (self.z_mask, self.z_c_positions, self.z_c, self.token_mask):
            arr.setflags(write=False)
        n_mem = self.memory_layout.m
        expected = np.r_[np.ones(n_mem, bool), np.zeros(self.z_t.layout.m, bool)]
        if not np.array_equal(self.z_mask, expected):
            raise ValueError("z_mask must flag memory slots as conditioning and targets as generated")
        if len(self.token_mask) != self.memory_layout.n_tokens:
            raise LengthMismatch("token_mask length does not match the memory layout")


def state_from_dense(
    dense_memory: np.ndarray,
    patch_mask: np.ndarray,
    memory_layout: MemoryLayout,
    target_latent: np.ndarray,
    seed: int = codec.DEFAULT_SEED,
) -> ConditioningState:
    """Patchify the dense memory, prune to ``patch_mask``, and tokenize targets."""
    token_mask = np.asarray(patch_mask, dtype=bool).reshape(-1)
    mem_grid = codec.patchify(dense_memory, memory_layout, seed)
    pos, kept = prune_tokens(mem_grid, token_mask)
    target_latent = np.asarray(target_latent, dtype=np.float64)
    target_layout = memory_layout.with_slots(target_latent.shape[0])
    z_t = codec.patchify(target_latent, target_layout, seed)
    z_mask = np.r_[np.ones(memory_layout.m, bool), np.zeros(target_layout.m, bool)]
    return ConditioningState(z_t, z_mask, pos, kept.copy(), token_mask.copy(), memory_layout)


def build_state(patches: PatchSet, target_latent: np.ndarray, seed: int = codec.DEFAULT_SEED) -> ConditioningState:
    dense, pmask = scatter_to_dense(patches)
    return state_from_dense(dense, pmask, patches.layout, target_latent, seed)


def denoise_shot(state: ConditioningState, steps: int, seed: int = codec.DEFAULT_SEED) -> np.ndarray:
    """Run ``steps`` mock denoising steps and return the target latent.

    Each step relaxes the target tokens toward the prediction by ``1/steps``:
    ``z_t <- z_t + (pred - z_t) / steps``. Target positions without a
    prediction keep their previous value.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    before = (state.z_c.tobytes(), state.z_mask.tobytes())
    z_t = state.z_t.copy()
    target_mask = np.ones(len(z_t.tokens), dtype=bool)
    for _ in range(steps):
        pred = mock_dit_step(state.z_c, z_t.tokens[target_mask], seed)
        full = scatter_tokens_back(pred, target_mask, fill=z_t)
        z_t = TokenGrid(z_t.layout, z_t.tokens + (full.tokens - z_t.tokens) / steps)
    assert (state.z_c.tobytes(), state.z_mask.tobytes()) == before, "conditioning changed during denoising"
    return codec.unpatchify(z_t, seed)


# -- cost accounting --------------------------------------------------------


COST_FIELDS = (
    "tokens_full",
    "tokens_kept",
    "target_tokens",
    "reduction",
    "attention_ops_full",
    "attention_ops_kept",
)


@dataclass(frozen=True)
class CostReport:
    """Memory-token counts and per-step attention-op counts.

    A single shot counts ``(memory + targets)^2`` ops per step; summed
    reports (see :func:`aggregate_costs`) add the per-shot op counts.
    """

    tokens_full: int
    tokens_kept: int
    target_tokens: int = 0
    attention_ops_full: int = -1
    attention_ops_kept: int = -1

    def __post_init__(self):
        if not 0 <= self.tokens_kept <= self.tokens_full:
            raise ValueError("tokens_kept must lie in [0, tokens_full]")
        if self.attention_ops_full < 0:
            object.__setattr__(self, "attention_ops_full", attention_ops(self.tokens_full + self.target_tokens))
        if self.attention_ops_kept < 0:
            object.__setattr__(self, "attention_ops_kept", attention_ops(self.tokens_kept + self.target_tokens))

    @property
    def reduction(self) -> float:
        return 0.0 if self.tokens_full == 0 else 1.0 - self.tokens_kept / self.tokens_full

    @property
    def ops_ratio(self) -> float:
        """Dense-to-pruned attention-op ratio."""
        return self.attention_ops_full / self.attention_ops_kept if self.attention_ops_kept else float("inf")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in COST_FIELDS}

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.as_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "CostReport":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        return cls(*(int(kv[k]) for k in COST_FIELDS if k != "reduction"))

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(
            self.tokens_full + other.tokens_full,
            self.tokens_kept + other.tokens_kept,
            self.target_tokens + other.target_tokens,
            self.attention_ops_full + other.attention_ops_full,
            self.attention_ops_kept + other.attention_ops_kept,
        )


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def attention_ops(n_tokens: int) -> int:
    return n_tokens * n_tokens


def cost_report(layout_full: MemoryLayout, mask: np.ndarray, target_tokens: int = 0) -> CostReport:
    mask = np.asarray(mask, dtype=bool).reshape(-1)
    if len(mask) != layout_full.n_tokens:
        raise LengthMismatch(f"mask has {len(mask)} entries for {layout_full.n_tokens} tokens")
    return CostReport(layout_full.n_tokens, int(mask.sum()), target_tokens)


def aggregate_costs(reports: list[CostReport]) -> CostReport:
    total = CostReport(0, 0, 0, 0, 0)
    for r in reports:
        total = total + r
    return total
