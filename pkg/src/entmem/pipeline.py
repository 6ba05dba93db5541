"""Multi-shot driver: conditioning, mock generation, bank updates, reports.

Run directory layout::

    run_config.json          resolved config (no output paths)
    script.json              normalized copy of the story script
    bank/initial.emvb        bank after reference ingestion
    bank/shot_NNN.emvb       bank after shot NNN
    bank/final.emvb          bank after the last shot
    shots/shot_NNN/
        latent.emvt          denoised target latent (T, C, H, W)
        samples.emvt         the 4 metric frames (4, H, W, 3)
        masks/<ID>.emvm      subject masks for those frames (4, H, W)
        cost.txt             key=value cost report
        record.json          keyframes, retrieval slots, bank decisions
    reports/
        costs.csv, aggregate.csv, decisions.csv, pairs.csv,
        metrics.json, summary.txt
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from entmem import appearance, rng
from entmem.bank import (
    BankConfig,
    DescriptorProvider,
    EntityBank,
    Origin,
    SyntheticDescriptorProvider,
    accept_candidate,
    appearance_similarity_max,
    enforce_budget,
    load_snapshot,
    snapshot,
)
from entmem.conditioning import CostReport, aggregate_costs, build_state, cost_report, denoise_shot, retrieve_memory
from entmem.errors import DegenerateInput, EmptyMask, EmptyPairSet, StageError
from entmem.metrics import (
    MODES,
    BackgroundObservation,
    MetricsReport,
    PenaltyConfig,
    ShotSubjectObservation,
    bga,
    csc,
    csc_star,
    pair_diagnostics,
    sample_frame_indices,
    shot_subject_embedding,
)
from entmem.script import EntityId, Shot, StoryScript, parse_script, serialize_script
from entmem.synth import mock_shot_synthesizer, select_keyframes
from entmem.tensors import read_mask, read_tensor, scene_complement, write_mask, write_tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Reference:
    entity: str
    frame: str
    mask: str


@dataclass(frozen=True)
class RunConfig:
    script: str
    output_dir: str = "run"
    bank: BankConfig = field(default_factory=BankConfig)
    steps: int = 4
    seed: int = 7
    frames_per_shot: int = 8
    keyframes_per_shot: int = 2
    target_slots: int = 1
    noise_sigma: float = appearance.DEFAULT_SIGMA
    update_every: int = 1
    jitter_patches: int = 2
    references: tuple[Reference, ...] = ()
    base_dir: str = "."

    def __post_init__(self):
        for name in ("steps", "frames_per_shot", "keyframes_per_shot", "target_slots"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.keyframes_per_shot > self.frames_per_shot:
            raise ValueError("keyframes_per_shot exceeds frames_per_shot")
        if self.update_every < 0:
            raise ValueError("update_every must be >= 0 (0 disables updates)")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bank"] = self.bank.to_dict()
        d.pop("base_dir")
        d.pop("output_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "RunConfig":
        d = dict(d)
        d["bank"] = BankConfig.from_dict(d.get("bank", {}))
        d["references"] = tuple(Reference(**r) for r in d.get("references", ()))
        d["base_dir"] = str(base_dir)
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)


@dataclass(frozen=True)
class UpdateRecord:
    keyframe: int
    entity: str
    decision: str
    s_max: float | None
    entry_index: int | None
    token_cost: int


@dataclass(eq=False)
class ShotResult:
    shot_num: int
    cost: CostReport
    keyframes: list[int]
    slot_keys: list[tuple[str, int]]
    updates: list[UpdateRecord] = field(default_factory=list)
    evictions: dict[str, list[int]] = field(default_factory=dict)
    bank_tokens: dict[str, int] = field(default_factory=dict)
    latent: np.ndarray | None = None
    frames: np.ndarray | None = None
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def record(self) -> dict:
        return {
            "shot_num": self.shot_num,
            "cost": self.cost.as_dict(),
            "keyframes": self.keyframes,
            "slot_keys": [list(k) for k in self.slot_keys],
            "updates": [asdict(u) for u in self.updates],
            "evictions": self.evictions,
            "bank_tokens": self.bank_tokens,
        }

    @classmethod
    def from_record(cls, d: dict) -> "ShotResult":
        c = d["cost"]
        cost = CostReport(c["tokens_full"], c["tokens_kept"], c["target_tokens"], c["attention_ops_full"], c["attention_ops_kept"])
        return cls(
            d["shot_num"],
            cost,
            d["keyframes"],
            [tuple(k) for k in d["slot_keys"]],
            [UpdateRecord(**u) for u in d["updates"]],
            d["evictions"],
            d["bank_tokens"],
        )


# -- stages -----------------------------------------------------------------


def load_script(config: RunConfig) -> StoryScript:
    return parse_script(config.resolve(config.script).read_text(encoding="utf-8"))


def init_bank(
    script: StoryScript, config: RunConfig, provider: DescriptorProvider | None = None
) -> EntityBank:
    """Declare every scripted entity and ingest reference (frame, mask, entity) triples."""
    provider = provider or SyntheticDescriptorProvider()
    bank = EntityBank(config.bank)
    for decl in script.declarations():
        bank.declare(decl.id)
    descriptions = {d.id: d.short_description for d in script.declarations()}
    for i, ref in enumerate(config.references):
        eid = EntityId.parse(ref.entity)
        if eid not in descriptions:
            raise ValueError(f"reference for undeclared entity {eid}")
        frame = read_tensor(config.resolve(ref.frame))
        mask = read_mask(config.resolve(ref.mask))
        entry = appearance.background_suppressed_entry(
            frame, mask, eid, descriptions[eid], i, provider, config.bank,
            sigma=config.noise_sigma, seed=rng.derive_seed(config.seed, "ref-noise", i),
        )
        accept_candidate(bank, entry)
        enforce_budget(bank, eid)
    return bank


def _foreground(synth_masks: dict[EntityId, np.ndarray], frame_idx: int) -> list[np.ndarray]:
    return [m[frame_idx] for _, m in sorted(synth_masks.items())]


def run_shot(
    shot: Shot,
    script: StoryScript,
    bank: EntityBank,
    config: RunConfig,
    provider: DescriptorProvider | None = None,
) -> ShotResult:
    """Generate one shot against ``bank`` and apply the bank update in place."""
    provider = provider or SyntheticDescriptorProvider()
    lay = config.bank.layout
    stride = config.bank.vae_stride
    cseed = config.bank.codec_seed
    descriptions = {d.id: d.short_description for d in script.declarations()}
    shot_seed = rng.derive_seed(config.seed, "shot", shot.shot_num)

    stage = "retrieve"
    try:
        refs = shot.entity_refs
        retrieved = retrieve_memory(bank, refs)

        stage = "denoise"
        target_layout = lay.with_slots(config.target_slots)
        noise = rng.normal(rng.derive_seed(shot_seed, "z_T"), target_layout.m * lay.c * lay.h * lay.w)
        state = build_state(retrieved.patches, noise.reshape(target_layout.m, lay.c, lay.h, lay.w), cseed)
        latent = denoise_shot(state, config.steps, cseed)
        cost = cost_report(retrieved.patches.layout, state.token_mask, target_layout.n_tokens)

        stage = "synthesize"
        synth = mock_shot_synthesizer(
            shot, retrieved, descriptions, lay, shot_seed,
            n_frames=config.frames_per_shot, stride=stride, jitter=config.jitter_patches, codec_seed=cseed,
        )

        stage = "keyframes"
        keyframes = select_keyframes(synth.frames, config.keyframes_per_shot)

        stage = "update"
        updates: list[UpdateRecord] = []
        evictions: dict[str, list[int]] = {}
        if config.update_every and shot.shot_num % config.update_every == 0:
            updates, evictions = _update_bank(shot, refs, synth, keyframes, bank, config, provider, descriptions, shot_seed)
    except Exception as exc:
        raise StageError(shot.shot_num, stage, exc) from exc

    samples = sample_frame_indices(config.frames_per_shot)
    return ShotResult(
        shot_num=shot.shot_num,
        cost=cost,
        keyframes=keyframes,
        slot_keys=[(e.raw, i) for e, i in retrieved.slot_keys],
        updates=updates,
        evictions=evictions,
        bank_tokens={e.raw: bank.token_cost(e) for e in bank.entity_ids()},
        latent=latent,
        frames=synth.frames[samples],
        masks={e.raw: m[samples] for e, m in sorted(synth.masks.items())},
    )


def _update_bank(shot, refs, synth, keyframes, bank, config, provider, descriptions, shot_seed):
    updates = []
    touched = set()
    height, width = synth.frames.shape[1:3]
    for kf in keyframes:
        frame = synth.frames[kf]
        for eid in refs:
            if eid.is_scene:
                mask = scene_complement(_foreground(synth.masks, kf), (height, width))
            elif eid in synth.masks:
                mask = synth.masks[eid][kf]
            else:
                continue
            if not mask.any():
                continue
            try:
                cand = appearance.background_suppressed_entry(
                    frame, mask, eid, descriptions[eid], shot.shot_num * 1000 + kf, provider, config.bank,
                    sigma=config.noise_sigma, seed=rng.derive_seed(shot_seed, "noise", kf, eid.raw),
                    origin=Origin.generated(shot.shot_num, kf),
                )
            except EmptyMask:
                continue
            s_max = appearance_similarity_max(bank, cand)
            decision = accept_candidate(bank, cand)
            entry_index = bank.entries[eid][-1].entry_index if decision.accepted else None
            updates.append(
                UpdateRecord(kf, eid.raw, decision.value, None if s_max == float("-inf") else s_max, entry_index, cand.token_cost)
            )
            touched.add(eid)
    evictions = {}
    for eid in sorted(touched):
        ev = enforce_budget(bank, eid)
        if ev:
            evictions[eid.raw] = ev
    return updates, evictions


# -- metrics ----------------------------------------------------------------


def compute_metrics(
    script: StoryScript,
    shots: list[tuple[int, np.ndarray, dict[str, np.ndarray]]],
    provider: DescriptorProvider | None = None,
    penalty: PenaltyConfig = PenaltyConfig(),
) -> MetricsReport:
    """Metrics over ``(shot_num, sampled frames, subject masks)`` triples."""
    provider = provider or SyntheticDescriptorProvider()
    descriptions = {d.id: d.short_description for d in script.declarations()}
    report = MetricsReport()
    for mode in MODES:
        subjects, backgrounds = [], []
        for shot_num, frames, masks in shots:
            shot = script.shot(shot_num)
            for raw, m in sorted(masks.items()):
                if all(mm.any() for mm in m):
                    e = shot_subject_embedding(list(frames), list(m), provider, mode)
                    subjects.append(ShotSubjectObservation(EntityId.parse(raw), shot_num, e, list(m)))
            height, width = frames.shape[1:3]
            bg_masks = [scene_complement([m[k] for m in masks.values()], (height, width)) for k in range(len(frames))]
            if all(b.any() for b in bg_masks):
                scene_text = " / ".join(descriptions[r] for r in shot.entity_refs if r.is_scene) or shot.natural_prompt
                backgrounds.append(
                    BackgroundObservation(
                        shot_num,
                        shot_subject_embedding(list(frames), bg_masks, provider, mode),
                        provider.embed_text(scene_text),
                    )
                )
        try:
            report.csc[mode] = csc(subjects)
            report.csc_star[mode] = csc_star(subjects, penalty)
            report.pairs[mode] = pair_diagnostics(subjects, penalty)
        except EmptyPairSet as exc:
            report.csc[mode] = report.csc_star[mode] = None
            report.pairs[mode] = []
            report.notes.append(f"{mode}: csc undefined ({exc})")
        try:
            report.bga[mode] = bga(backgrounds)
        except DegenerateInput as exc:
            report.bga[mode] = None
            report.notes.append(f"{mode}: bga undefined ({exc})")
        if mode == MODES[0]:
            report.n_pairs = len(report.pairs[mode])
    return report


# -- output -----------------------------------------------------------------


def shot_dir(run_dir: Path, shot_num: int) -> Path:
    return Path(run_dir) / "shots" / f"shot_{shot_num:03d}"


def write_shot(run_dir: Path, result: ShotResult) -> None:
    d = shot_dir(run_dir, result.shot_num)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    write_tensor(d / "latent.emvt", result.latent)
    write_tensor(d / "samples.emvt", result.frames)
    for raw, m in result.masks.items():
        write_mask(d / "masks" / f"{raw}.emvm", m)
    (d / "cost.txt").write_text(result.cost.to_text())
    (d / "record.json").write_text(_dumps(result.record()))


def load_shot_samples(run_dir: Path, shot_num: int) -> tuple[int, np.ndarray, dict[str, np.ndarray]]:
    d = shot_dir(run_dir, shot_num)
    masks = {p.stem: read_mask(p) for p in sorted((d / "masks").glob("*.emvm"))}
    return shot_num, read_tensor(d / "samples.emvt"), masks


def load_shot_results(run_dir: Path) -> list[ShotResult]:
    paths = sorted((Path(run_dir) / "shots").glob("shot_*/record.json"))
    return [ShotResult.from_record(json.loads(p.read_text())) for p in paths]


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()


COST_HEADER = ["shot_num", "slots", "tokens_full", "tokens_kept", "target_tokens", "reduction",
               "attention_ops_full", "attention_ops_kept"]


def emit_reports(results: list[ShotResult], metrics: MetricsReport | None, path) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    results = sorted(results, key=lambda r: r.shot_num)

    cost_rows = [
        [r.shot_num, len(r.slot_keys), r.cost.tokens_full, r.cost.tokens_kept, r.cost.target_tokens,
         r.cost.reduction, r.cost.attention_ops_full, r.cost.attention_ops_kept]
        for r in results
    ]
    (out / "costs.csv").write_text(_csv(COST_HEADER, cost_rows))

    agg_rows = []
    if results:
        total = aggregate_costs([r.cost for r in results])
        agg_rows.append([len(results), total.tokens_full, total.tokens_kept, total.reduction,
                         total.attention_ops_full, total.attention_ops_kept, total.ops_ratio])
    (out / "aggregate.csv").write_text(_csv(
        ["shots", "tokens_full", "tokens_kept", "reduction", "attention_ops_full", "attention_ops_kept", "ops_ratio"],
        agg_rows,
    ))

    dec_rows = []
    for r in results:
        for u in r.updates:
            evicted = u.entity in r.evictions and u.entry_index in r.evictions[u.entity]
            dec_rows.append([r.shot_num, u.keyframe, u.entity, u.decision, u.s_max, u.entry_index, u.token_cost,
                             int(evicted)])
    (out / "decisions.csv").write_text(_csv(
        ["shot_num", "keyframe", "entity", "decision", "s_max", "entry_index", "token_cost", "evicted"], dec_rows
    ))

    pair_rows = []
    if metrics is not None:
        for mode in MODES:
            for p in metrics.pairs.get(mode, []):
                pair_rows.append([mode, p.subject, p.shot_i, p.shot_j, p.cos, p.iou, p.duplicate_risk, p.penalized])
        (out / "metrics.json").write_text(_dumps(metrics.as_dict()))
    (out / "pairs.csv").write_text(_csv(
        ["mode", "subject", "shot_i", "shot_j", "cos", "iou", "duplicate_risk", "penalized_cos"], pair_rows
    ))

    lines = [f"shots: {len(results)}"]
    if results:
        total = aggregate_costs([r.cost for r in results])
        lines += [
            f"memory tokens kept/full: {total.tokens_kept}/{total.tokens_full}",
            f"memory token reduction: {100 * total.reduction:.1f}%",
            f"attention ops ratio (dense/pruned): {total.ops_ratio:.2f}",
        ]
    if metrics is not None:
        for mode in MODES:
            lines.append(
                f"{mode}: CSC={_opt(metrics.csc.get(mode))} CSC*={_opt(metrics.csc_star.get(mode))} "
                f"BGA={_opt(metrics.bga.get(mode))}"
            )
    (out / "summary.txt").write_text("\n".join(lines) + "\n")


def _opt(v) -> str:
    return "n/a" if v is None else f"{v:.4f}"


# -- whole runs -------------------------------------------------------------


def bank_path(run_dir: Path, after_shot: int) -> Path:
    name = "initial.emvb" if after_shot == 0 else f"shot_{after_shot:03d}.emvb"
    return Path(run_dir) / "bank" / name


def prepare_run_dir(script: StoryScript, config: RunConfig, run_dir: Path, provider=None) -> EntityBank:
    run_dir = Path(run_dir)
    (run_dir / "bank").mkdir(parents=True, exist_ok=True)
    (run_dir / "run_config.json").write_text(_dumps(config.to_dict()))
    (run_dir / "script.json").write_text(serialize_script(script))
    bank = init_bank(script, config, provider)
    snapshot(bank, bank_path(run_dir, 0))
    return bank


def step(run_dir: Path, shot_num: int, config: RunConfig, provider=None) -> ShotResult:
    """Run one shot from the bank saved after the previous shot."""
    run_dir = Path(run_dir)
    prev = bank_path(run_dir, shot_num - 1)
    if not prev.exists():
        raise FileNotFoundError(f"{prev} missing; run earlier shots (or init-bank) first")
    script = parse_script((run_dir / "script.json").read_text(encoding="utf-8"))
    bank = load_snapshot(prev)
    result = run_shot(script.shot(shot_num), script, bank, config, provider)
    snapshot(bank, bank_path(run_dir, shot_num))
    write_shot(run_dir, result)
    return result


def run_story(script: StoryScript, config: RunConfig, run_dir=None, provider=None):
    """Process every shot in order; returns ``(bank, results, metrics, aggregate_cost)``.

    With ``run_dir`` set, bank snapshots, shot tensors and reports are
    written there as well.
    """
    provider = provider or SyntheticDescriptorProvider()
    if run_dir is not None:
        bank = prepare_run_dir(script, config, Path(run_dir), provider)
    else:
        bank = init_bank(script, config, provider)
    results = []
    for shot in script.shots:
        log.info("shot %d: %s", shot.shot_num, shot.abstract_prompt)
        result = run_shot(shot, script, bank, config, provider)
        results.append(result)
        if run_dir is not None:
            snapshot(bank, bank_path(run_dir, shot.shot_num))
            write_shot(Path(run_dir), result)
    metrics = compute_metrics(script, [(r.shot_num, r.frames, r.masks) for r in results], provider)
    aggregate = aggregate_costs([r.cost for r in results])
    if run_dir is not None:
        snapshot(bank, Path(run_dir) / "bank" / "final.emvb")
        emit_reports(results, metrics, Path(run_dir) / "reports")
    return bank, results, metrics, aggregate


def metrics_from_run_dir(run_dir, provider=None) -> MetricsReport:
    run_dir = Path(run_dir)
    script = parse_script((run_dir / "script.json").read_text(encoding="utf-8"))
    shots = [load_shot_samples(run_dir, r.shot_num) for r in load_shot_results(run_dir)]
    return compute_metrics(script, shots, provider)
