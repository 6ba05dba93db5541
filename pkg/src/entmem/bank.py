"""Entity-indexed memory of sparse latent patches.

Each entity keeps an ordered list of entries. An entry holds the latent
patches that overlapped the entity's mask in one memory frame, their patch
coordinates, the source frame index, and two descriptors: a unit appearance
vector (compared between entries to gate admission) and a text relevance
score (used for budgeted eviction).

The bank is single-writer: mutate it from one place and hand readers a
snapshot or a deep copy.
"""

from __future__ import annotations

import copy
import enum
import hashlib
import json
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Protocol

import numpy as np

from entmem import codec
from entmem.errors import DimensionMismatch, EmptyMask, FormatError, VersionMismatch
from entmem.script import EntityId
from entmem.tensors import MemoryLayout, downsample_mask, tensor_from_bytes, tensor_to_bytes

NO_ENTRIES = float("-inf")
SNAPSHOT_MAGIC = b"EMVB"
SNAPSHOT_VERSION = 1


class BudgetWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BankConfig:
    tau_minmatch: float = 0.50
    tau_redundant: float = 0.95
    token_budget: int = 256
    overlap_threshold: float = 0.0
    scene_overlap_threshold: float = 0.5
    vae_stride: int = 8
    layout: MemoryLayout = field(default_factory=MemoryLayout)
    codec_seed: int = codec.DEFAULT_SEED

    def __post_init__(self):
        if not self.tau_minmatch < self.tau_redundant:
            raise ValueError("tau_minmatch must be below tau_redundant")
        if not (-1 <= self.tau_minmatch <= 1 and -1 <= self.tau_redundant <= 1):
            raise ValueError("thresholds must lie in [-1, 1]")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")

    def threshold_for(self, entity: EntityId) -> float:
        return self.scene_overlap_threshold if entity.is_scene else self.overlap_threshold

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.layout.h * self.vae_stride, self.layout.w * self.vae_stride

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = asdict(self.layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BankConfig":
        d = dict(d)
        if "layout" in d:
            d["layout"] = MemoryLayout(**d["layout"])
        return cls(**d)


@dataclass(frozen=True)
class Origin:
    """Where an entry came from: a user reference or a generated keyframe."""

    kind: str = "user"
    shot_num: int | None = None
    keyframe: int | None = None

    @classmethod
    def generated(cls, shot_num: int, keyframe: int) -> "Origin":
        return cls("generated", shot_num, keyframe)


@dataclass(frozen=True, eq=False)
class LatentPatch:
    coord: tuple[int, int]
    frame_index: int
    values: np.ndarray


@dataclass(eq=False)
class EntityEntry:
    entity: EntityId
    entry_index: int
    frame_index: int
    coords: np.ndarray  # (n, 2) as (x, y)
    values: np.ndarray  # (n, C, ph, pw) float32
    appearance_vec: np.ndarray
    relevance_score: float
    origin: Origin = Origin()

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        self.values = np.asarray(self.values, dtype=np.float32)
        self.appearance_vec = np.asarray(self.appearance_vec, dtype=np.float64)
        if len(self.coords) == 0:
            raise EmptyMask(f"entry for {self.entity} has no patches")
        if len(self.values) != len(self.coords):
            raise DimensionMismatch("coords and values disagree in length")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("patch values must be finite")
        if abs(np.linalg.norm(self.appearance_vec) - 1.0) > 1e-6:
            raise ValueError("appearance_vec must be unit-norm")

    @property
    def token_cost(self) -> int:
        return len(self.coords)

    @property
    def keep_score(self) -> float:
        """Relevance per memory token."""
        return keep_score(self.relevance_score, self.token_cost)

    @property
    def patches(self) -> list[LatentPatch]:
        return [
            LatentPatch((int(x), int(y)), self.frame_index, v)
            for (x, y), v in zip(self.coords, self.values)
        ]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EntityEntry):
            return NotImplemented
        return (
            self.entity == other.entity
            and self.entry_index == other.entry_index
            and self.frame_index == other.frame_index
            and self.origin == other.origin
            and self.relevance_score == other.relevance_score
            and np.array_equal(self.coords, other.coords)
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.appearance_vec, other.appearance_vec)
        )


def keep_score(relevance: float, n_tokens: int) -> float:
    return relevance / n_tokens


# -- descriptors ------------------------------------------------------------


class DescriptorProvider(Protocol):
    def embed_appearance(self, frame: np.ndarray, mask: np.ndarray) -> np.ndarray: ...

    def score_relevance(self, frame: np.ndarray, mask: np.ndarray, description: str) -> float: ...

    def embed_text(self, text: str) -> np.ndarray: ...


def _hash_bucket(token: str, dim: int) -> tuple[int, float]:
    h = int.from_bytes(hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest(), "little")
    return h % dim, (1.0 if (h >> 63) & 1 else -1.0)


def _unit(v: np.ndarray) -> np.ndarray:
    n = math.sqrt(math.fsum(v * v))
    return v / n


class SyntheticDescriptorProvider:
    """Deterministic descriptors built from masked pixel statistics.

    Appearance: masked RGB means, masked RGB variances, and mean luminance on
    a 4x4 grid over the mask's bounding box (means and luminances centred on
    0.5), plus a small constant so flat grey still has a direction.
    Relevance: cosine between hashed character trigrams of the description
    and a hashed quantization of the appearance vector.
    """

    text_dim = 64
    grid = 4
    bias = 0.05

    def embed_appearance(self, frame, mask):
        frame = np.asarray(frame, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != frame.shape[:2]:
            raise DimensionMismatch(f"mask {mask.shape} vs frame {frame.shape[:2]}")
        if not mask.any():
            raise EmptyMask("cannot describe an empty region")
        px = frame[mask]
        means = px.mean(axis=0)
        variances = px.var(axis=0)

        ys, xs = np.nonzero(mask)
        y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
        lum = frame[y0:y1, x0:x1].mean(axis=2)
        sub = mask[y0:y1, x0:x1]
        cells = np.zeros((self.grid, self.grid))
        ry = np.linspace(0, y1 - y0, self.grid + 1).astype(int)
        rx = np.linspace(0, x1 - x0, self.grid + 1).astype(int)
        for i in range(self.grid):
            for j in range(self.grid):
                m = sub[ry[i] : ry[i + 1], rx[j] : rx[j + 1]]
                if m.any():
                    cells[i, j] = lum[ry[i] : ry[i + 1], rx[j] : rx[j + 1]][m].mean() - 0.5
        vec = np.concatenate([means - 0.5, variances, cells.ravel(), [self.bias]])
        return _unit(vec)

    def embed_text(self, text):
        vec = np.zeros(self.text_dim)
        padded = f"  {text.lower()} "
        for i in range(len(padded) - 2):
            b, s = _hash_bucket("t:" + padded[i : i + 3], self.text_dim)
            vec[b] += s
        if not vec.any():
            vec[0] = 1.0
        return _unit(vec)

    def score_relevance(self, frame, mask, description):
        app = self.embed_appearance(frame, mask)
        vec = np.zeros(self.text_dim)
        for i, a in enumerate(app):
            b, s = _hash_bucket(f"a:{i}:{int(round(a * 8))}", self.text_dim)
            vec[b] += s * abs(a)
        if not vec.any():
            return 0.0
        cos = float(np.dot(_unit(vec), self.embed_text(description)))
        return min(1.0, max(-1.0, cos))


# -- entries ----------------------------------------------------------------


def build_entry(
    frame: np.ndarray,
    pixel_mask: np.ndarray,
    entity: EntityId,
    description: str,
    frame_index: int,
    provider: DescriptorProvider,
    config: BankConfig,
    origin: Origin = Origin(),
) -> EntityEntry:
    """Encode ``frame`` and keep the latent patches overlapping ``pixel_mask``.

    The returned entry is a candidate: ``entry_index`` is -1 until the bank
    accepts it.
    """
    frame = np.asarray(frame, dtype=np.float32)
    pixel_mask = np.asarray(pixel_mask, dtype=bool)
    if pixel_mask.shape != frame.shape[:2]:
        raise DimensionMismatch(f"mask {pixel_mask.shape} vs frame {frame.shape[:2]}")
    if not pixel_mask.any():
        raise EmptyMask(f"empty mask for {entity}")
    lay = config.layout.with_slots(1)
    latent = codec.vae_encode(frame, config.vae_stride, lay.c, config.codec_seed)
    if latent.shape[1:] != (lay.h, lay.w):
        raise DimensionMismatch(f"frame encodes to {latent.shape[1:]}, layout is {(lay.h, lay.w)}")
    cells = downsample_mask(pixel_mask, lay, config.vae_stride, config.threshold_for(entity))
    ys, xs = np.nonzero(cells)
    if len(ys) == 0:
        raise EmptyMask(f"no latent patch of {entity} passes overlap threshold {config.threshold_for(entity)}")
    blocks = latent.reshape(lay.c, lay.grid_h, lay.ph, lay.grid_w, lay.pw).transpose(1, 3, 0, 2, 4)
    return EntityEntry(
        entity=entity,
        entry_index=-1,
        frame_index=frame_index,
        coords=np.stack([xs, ys], axis=1),
        values=blocks[ys, xs].astype(np.float32),
        appearance_vec=provider.embed_appearance(frame, pixel_mask),
        relevance_score=float(provider.score_relevance(frame, pixel_mask, description)),
        origin=origin,
    )


# -- bank -------------------------------------------------------------------


class Decision(enum.Enum):
    ACCEPTED_EMPTY = "AcceptedEmpty"
    ACCEPTED_IN_RANGE = "AcceptedInRange"
    REJECTED_LOW = "RejectedLow"
    REJECTED_REDUNDANT = "RejectedRedundant"

    @property
    def accepted(self) -> bool:
        return self in (Decision.ACCEPTED_EMPTY, Decision.ACCEPTED_IN_RANGE)


@dataclass(eq=False)
class EntityBank:
    config: BankConfig = field(default_factory=BankConfig)
    entries: dict[EntityId, list[EntityEntry]] = field(default_factory=dict)
    next_index: dict[EntityId, int] = field(default_factory=dict)

    def declare(self, entity: EntityId) -> None:
        self.entries.setdefault(entity, [])
        self.next_index.setdefault(entity, 0)

    def entity_ids(self) -> list[EntityId]:
        return sorted(self.entries)

    def token_cost(self, entity: EntityId) -> int:
        return sum(e.token_cost for e in self.entries.get(entity, []))

    def copy(self) -> "EntityBank":
        return copy.deepcopy(self)

    def __contains__(self, entity: EntityId) -> bool:
        return entity in self.entries

    def __eq__(self, other) -> bool:
        if not isinstance(other, EntityBank):
            return NotImplemented
        return (
            self.config == other.config
            and self.next_index == other.next_index
            and self.entity_ids() == other.entity_ids()
            and all(self.entries[k] == other.entries[k] for k in self.entries)
        )


def appearance_similarity_max(bank: EntityBank, candidate: EntityEntry) -> float:
    stored = bank.entries.get(candidate.entity, [])
    if not stored:
        return NO_ENTRIES
    return max(float(np.dot(candidate.appearance_vec, e.appearance_vec)) for e in stored)


def accept_candidate(bank: EntityBank, candidate: EntityEntry, config: BankConfig | None = None) -> Decision:
    """Admit ``candidate`` if its entity is empty or its best match lies in the band."""
    config = config or bank.config
    bank.declare(candidate.entity)
    s_max = appearance_similarity_max(bank, candidate)
    if s_max == NO_ENTRIES:
        decision = Decision.ACCEPTED_EMPTY
    elif s_max < config.tau_minmatch:
        return Decision.REJECTED_LOW
    elif s_max > config.tau_redundant:
        return Decision.REJECTED_REDUNDANT
    else:
        decision = Decision.ACCEPTED_IN_RANGE
    idx = bank.next_index[candidate.entity]
    bank.entries[candidate.entity].append(replace(candidate, entry_index=idx))
    bank.next_index[candidate.entity] = idx + 1
    return decision


@dataclass(frozen=True)
class BudgetStep:
    entry_index: int
    keep_score: float
    token_cost: int
    kept: bool
    cumulative: int  # token total after this step


def plan_budget(entries: list[EntityEntry], budget: int) -> list[BudgetStep]:
    """Greedy selection trace: protected first entry, then descending keep score.

    Ties go to the lower entry index. An entry that would overflow the budget
    is skipped and later (cheaper) entries are still considered.
    """
    if not entries:
        return []
    first, rest = entries[0], entries[1:]
    total = first.token_cost
    trace = [BudgetStep(first.entry_index, first.keep_score, first.token_cost, True, total)]
    for e in sorted(rest, key=lambda e: (-e.keep_score, e.entry_index)):
        fits = total + e.token_cost <= budget
        if fits:
            total += e.token_cost
        trace.append(BudgetStep(e.entry_index, e.keep_score, e.token_cost, fits, total))
    return trace


def enforce_budget(bank: EntityBank, entity: EntityId) -> list[int]:
    """Evict entries beyond the per-entity token budget; returns evicted indices."""
    entries = bank.entries.get(entity, [])
    budget = bank.config.token_budget
    if entries and entries[0].token_cost > budget:
        warnings.warn(
            f"{entity}: protected first entry costs {entries[0].token_cost} > budget {budget}",
            BudgetWarning,
            stacklevel=2,
        )
    trace = plan_budget(entries, budget)
    kept = {s.entry_index for s in trace if s.kept}
    evicted = sorted(s.entry_index for s in trace if not s.kept)
    if evicted:
        bank.entries[entity] = [e for e in entries if e.entry_index in kept]
    return evicted


# -- snapshots --------------------------------------------------------------


def _entry_header(e: EntityEntry, offset: int, length: int) -> dict:
    return {
        "entry_index": e.entry_index,
        "frame_index": e.frame_index,
        "coords": e.coords.tolist(),
        "appearance_vec": [float(v) for v in e.appearance_vec],
        "relevance_score": e.relevance_score,
        "origin": asdict(e.origin),
        "blob_offset": offset,
        "blob_length": length,
    }


def snapshot_bytes(bank: EntityBank) -> bytes:
    blobs: list[bytes] = []
    offset = 0
    entities = []
    for eid in bank.entity_ids():
        headers = []
        for e in bank.entries[eid]:
            blob = tensor_to_bytes(e.values)
            headers.append(_entry_header(e, offset, len(blob)))
            blobs.append(blob)
            offset += len(blob)
        entities.append({"id": eid.raw, "next_index": bank.next_index.get(eid, 0), "entries": headers})
    header = {"format_version": SNAPSHOT_VERSION, "config": bank.config.to_dict(), "entities": entities}
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return SNAPSHOT_MAGIC + struct.pack("<HI", SNAPSHOT_VERSION, len(raw)) + raw + b"".join(blobs)


def bank_from_bytes(buf: bytes) -> EntityBank:
    if len(buf) < 10 or buf[:4] != SNAPSHOT_MAGIC:
        raise FormatError("not an entity-bank snapshot")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != SNAPSHOT_VERSION:
        raise VersionMismatch(f"snapshot version {version}, supported {SNAPSHOT_VERSION}")
    start = 10 + hlen
    if len(buf) < start:
        raise FormatError("truncated snapshot header")
    try:
        header = json.loads(buf[10:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt snapshot header: {exc}") from None
    if header.get("format_version") != SNAPSHOT_VERSION:
        raise VersionMismatch(f"header version {header.get('format_version')}")

    blobs = memoryview(buf)[start:]
    bank = EntityBank(BankConfig.from_dict(header["config"]))
    expected = 0
    for ent in header["entities"]:
        eid = EntityId.parse(ent["id"])
        bank.declare(eid)
        bank.next_index[eid] = ent["next_index"]
        for h in ent["entries"]:
            lo, n = h["blob_offset"], h["blob_length"]
            if lo + n > len(blobs):
                raise FormatError(f"truncated patch payload for {eid} entry {h['entry_index']}")
            expected = max(expected, lo + n)
            bank.entries[eid].append(
                EntityEntry(
                    entity=eid,
                    entry_index=h["entry_index"],
                    frame_index=h["frame_index"],
                    coords=np.asarray(h["coords"], dtype=np.int64).reshape(-1, 2),
                    values=tensor_from_bytes(bytes(blobs[lo : lo + n])),
                    appearance_vec=np.asarray(h["appearance_vec"], dtype=np.float64),
                    relevance_score=h["relevance_score"],
                    origin=Origin(**h["origin"]),
                )
            )
    if expected != len(blobs):
        raise FormatError(f"snapshot has {len(blobs) - expected} trailing bytes")
    return bank


def snapshot(bank: EntityBank, path) -> None:
    Path(path).write_bytes(snapshot_bytes(bank))


def load_snapshot(path) -> EntityBank:
    return bank_from_bytes(Path(path).read_bytes())
