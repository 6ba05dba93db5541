"""Cross-shot consistency metrics.

* CSC: mean cosine between shot-level subject embeddings over all pairs of
  shots that share a subject.
* CSC*: CSC with each pair discounted by a duplicate risk, the product of
  two smoothstep gates on identity similarity and silhouette IoU, so
  copy-pasted subjects do not score as perfectly consistent.
* BGA: Spearman correlation between pairwise background similarities and
  pairwise scene-description similarities.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from entmem.errors import DegenerateInput, EmptyMask, EmptyPairSet, InvalidEdges, LengthMismatch
from entmem.script import EntityId

PATCH_POOLED = "patch-pooled"
MASKED_IMAGE = "masked-image"
MODES = (PATCH_POOLED, MASKED_IMAGE)
SAMPLES_PER_SHOT = 4


@dataclass(frozen=True)
class PenaltyConfig:
    alpha1: float = 0.88
    alpha2: float = 0.96
    beta1: float = 0.75
    beta2: float = 0.90
    resolution: int = 64

    def __post_init__(self):
        if not (self.alpha1 < self.alpha2 and self.beta1 < self.beta2):
            raise InvalidEdges("smoothstep edges must be increasing")
        if self.resolution < 8:
            raise ValueError("silhouette resolution must be >= 8")


def smoothstep(a: float, b: float, x: float) -> float:
    if not a < b:
        raise InvalidEdges(f"smoothstep needs a < b, got [{a}, {b}]")
    if x <= a:
        return 0.0
    if x >= b:
        return 1.0
    t = (x - a) / (b - a)
    return t * t * (3.0 - 2.0 * t)


def _bbox(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("silhouette of an empty mask")
    ys, xs = np.nonzero(mask)
    return mask[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1]


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize sampling source pixel ``floor((i + 0.5) * n / size)``."""
    h, w = mask.shape
    rows = ((np.arange(size) + 0.5) * h / size).astype(np.int64)
    cols = ((np.arange(size) + 0.5) * w / size).astype(np.int64)
    return mask[rows][:, cols]


def normalize_silhouette(mask: np.ndarray, resolution: int = 64) -> np.ndarray:
    return resize_nearest(_bbox(mask), resolution)


def silhouette_iou(m1: np.ndarray, m2: np.ndarray, resolution: int = 64) -> float:
    a = normalize_silhouette(m1, resolution)
    b = normalize_silhouette(m2, resolution)
    return int((a & b).sum()) / int((a | b).sum())


def sample_frame_indices(n_frames: int, k: int = SAMPLES_PER_SHOT) -> list[int]:
    """``k`` frame indices spread uniformly over the shot, both ends included."""
    if n_frames < 1:
        raise ValueError("shot has no frames")
    if k == 1:
        return [0]
    return [int(round(j * (n_frames - 1) / (k - 1))) for j in range(k)]


def _unit(v: np.ndarray) -> np.ndarray:
    n = float(np.linalg.norm(v))
    if n == 0:
        raise DegenerateInput("cannot normalize a zero vector")
    return v / n


def shot_subject_embedding(frames, masks, provider, mode: str = PATCH_POOLED) -> np.ndarray:
    """Mean of per-frame region embeddings, l2-normalized.

    ``patch-pooled`` embeds the masked region of the frame directly;
    ``masked-image`` zeroes pixels outside the mask and embeds the whole
    frame.
    """
    if len(frames) != len(masks) or not frames:
        raise LengthMismatch("need one mask per frame")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    vecs = []
    for frame, mask in zip(frames, masks):
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise EmptyMask("subject mask is empty in a sampled frame")
        if mode == PATCH_POOLED:
            vecs.append(provider.embed_appearance(frame, mask))
        else:
            blanked = np.where(mask[..., None], frame, 0).astype(np.float32)
            vecs.append(provider.embed_appearance(blanked, np.ones_like(mask)))
    return _unit(np.mean(vecs, axis=0))


@dataclass(eq=False)
class ShotSubjectObservation:
    subject: EntityId
    shot: int
    embedding: np.ndarray
    masks: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if abs(np.linalg.norm(self.embedding) - 1.0) > 1e-6:
            raise ValueError("embedding must be unit-norm")


@dataclass(eq=False)
class BackgroundObservation:
    shot: int
    embedding: np.ndarray
    scene_text_embedding: np.ndarray


@dataclass(frozen=True)
class PairDiagnostic:
    subject: str
    shot_i: int
    shot_j: int
    cos: float
    iou: float
    identity_high: float
    silhouette_same: float

    @property
    def duplicate_risk(self) -> float:
        return self.identity_high * self.silhouette_same

    @property
    def penalized(self) -> float:
        return self.cos * (1.0 - self.duplicate_risk)


def matched_pairs(observations: list[ShotSubjectObservation]):
    """Unordered shot pairs ``i < j`` per subject."""
    by_subject: dict[EntityId, list[ShotSubjectObservation]] = {}
    for obs in observations:
        by_subject.setdefault(obs.subject, []).append(obs)
    for subject in sorted(by_subject):
        group = sorted(by_subject[subject], key=lambda o: o.shot)
        yield from itertools.combinations(group, 2)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    return float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))


def shot_iou(a: ShotSubjectObservation, b: ShotSubjectObservation, resolution: int) -> float:
    """Mean silhouette IoU over index-aligned sampled frames."""
    if not a.masks or len(a.masks) != len(b.masks):
        raise LengthMismatch("observations need the same number of sampled masks")
    return float(np.mean([silhouette_iou(m, n, resolution) for m, n in zip(a.masks, b.masks)]))


def pair_diagnostics(
    observations: list[ShotSubjectObservation], config: PenaltyConfig = PenaltyConfig()
) -> list[PairDiagnostic]:
    out = []
    for a, b in matched_pairs(observations):
        cos = cosine(a.embedding, b.embedding)
        iou = shot_iou(a, b, config.resolution)
        out.append(
            PairDiagnostic(
                a.subject.raw,
                a.shot,
                b.shot,
                cos,
                iou,
                smoothstep(config.alpha1, config.alpha2, cos),
                smoothstep(config.beta1, config.beta2, iou),
            )
        )
    return out


def csc(observations: list[ShotSubjectObservation]) -> float:
    cosines = [cosine(a.embedding, b.embedding) for a, b in matched_pairs(observations)]
    if not cosines:
        raise EmptyPairSet("no subject appears in two shots")
    return math.fsum(cosines) / len(cosines)


def csc_star(observations: list[ShotSubjectObservation], config: PenaltyConfig = PenaltyConfig()) -> float:
    diags = pair_diagnostics(observations, config)
    if not diags:
        raise EmptyPairSet("no subject appears in two shots")
    return math.fsum(d.penalized for d in diags) / len(diags)


def average_ranks(values) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(xs, ys) -> float:
    if len(xs) != len(ys):
        raise LengthMismatch(f"{len(xs)} vs {len(ys)} values")
    if len(xs) < 2:
        raise DegenerateInput("need at least two observations")
    rx, ry = average_ranks(xs), average_ranks(ys)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sxx, syy = float(np.dot(dx, dx)), float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise DegenerateInput("constant sequence has no rank correlation")
    return max(-1.0, min(1.0, float(np.dot(dx, dy)) / math.sqrt(sxx * syy)))


def bga(bg_obs: list[BackgroundObservation]) -> float:
    if len(bg_obs) < 3:
        raise DegenerateInput("need at least three shots")
    obs = sorted(bg_obs, key=lambda o: o.shot)
    visual, text = [], []
    for a, b in itertools.combinations(obs, 2):
        visual.append(cosine(a.embedding, b.embedding))
        text.append(cosine(a.scene_text_embedding, b.scene_text_embedding))
    return spearman(visual, text)


@dataclass
class MetricsReport:
    """Per-mode scores; ``None`` where the metric is undefined for the run."""

    csc: dict[str, float | None] = field(default_factory=dict)
    csc_star: dict[str, float | None] = field(default_factory=dict)
    bga: dict[str, float | None] = field(default_factory=dict)
    n_pairs: int = 0
    pairs: dict[str, list[PairDiagnostic]] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "csc": self.csc,
            "csc_star": self.csc_star,
            "bga": self.bga,
            "n_pairs": self.n_pairs,
            "notes": self.notes,
        }
