import json

import numpy as np
import pytest

from entmem import codec
from entmem.bank import BankConfig, EntityBank, SyntheticDescriptorProvider, accept_candidate, build_entry
from entmem.conditioning import retrieve_memory
from entmem.demo import BOY_AND_DOG, reference_asset
from entmem.errors import InvalidK
from entmem.script import EntityId, parse_script
from entmem.synth import background, laplacian_variance, mock_shot_synthesizer, select_keyframes
from entmem.tensors import MemoryLayout

LAYOUT = MemoryLayout(m=1, c=4, h=16, w=16, ph=2, pw=2)
STRIDE = 4
CONFIG = BankConfig(layout=LAYOUT, vae_stride=STRIDE)
PROVIDER = SyntheticDescriptorProvider()
SCRIPT = parse_script(BOY_AND_DOG)
SHOT = SCRIPT.shot(1)
DESCRIPTIONS = {d.id: d.short_description for d in SCRIPT.declarations()}


def empty_bank():
    bank = EntityBank(CONFIG)
    for d in SCRIPT.declarations():
        bank.declare(d.id)
    return bank


def bank_with_boy():
    bank = empty_bank()
    eid = EntityId.parse("CH_01")
    frame, mask = reference_asset(eid, DESCRIPTIONS[eid], "studio", LAYOUT, STRIDE)
    accept_candidate(bank, build_entry(frame, mask, eid, DESCRIPTIONS[eid], 0, PROVIDER, CONFIG))
    return bank, frame, mask


def synth(bank, seed=5, **kw):
    return mock_shot_synthesizer(SHOT, retrieve_memory(bank, SHOT.entity_refs), DESCRIPTIONS, LAYOUT, seed,
                                 stride=STRIDE, **kw)


def test_empty_memory_without_entities_is_background():
    shot = parse_script(
        '{"story_name": "s", "story_overview": "o", "characters": [], "objects": [], "scenes": [{"id": "SC_01", "short_description": "beach"}],'
        ' "shots": [{"shot_num": 1, "abstract_prompt": "[SC_01] at dawn.", "natural_prompt": "beach at dawn."}]}'
    ).shot(1)
    descriptions = {EntityId.parse("SC_01"): "beach"}
    out = mock_shot_synthesizer(shot, retrieve_memory(EntityBank(CONFIG), []), descriptions, LAYOUT, 1,
                                n_frames=3, stride=STRIDE)
    assert out.masks == {}
    bg = background("beach", 64, 64, STRIDE)
    assert np.abs(out.frames - bg).max() < 0.1
    assert out.frames.shape == (3, 64, 64, 3)


def test_procedural_entities_without_memory():
    out = synth(empty_bank())
    assert set(out.masks) == {EntityId.parse(r) for r in ("CH_01", "CH_02", "OB_01")}
    for m in out.masks.values():
        assert m.shape == (8, 64, 64) and m.any()
    total = sum(m[0].astype(int) for m in out.masks.values())
    assert total.max() <= 1  # visible masks never overlap


def test_synthesizer_is_deterministic():
    bank, _, _ = bank_with_boy()
    a, b = synth(bank), synth(bank)
    assert a.frames.tobytes() == b.frames.tobytes()
    assert all(a.masks[k].tobytes() == b.masks[k].tobytes() for k in a.masks)
    assert synth(bank, seed=6).frames.tobytes() != a.frames.tobytes()


def render_source(entry, layout, stride):
    """Decoded entry patches at their stored coordinates, and their footprint mask."""
    fh, fw = layout.ph * stride, layout.pw * stride
    canvas = np.zeros((layout.h * stride, layout.w * stride, 3))
    mask = np.zeros(canvas.shape[:2], bool)
    for (x, y), v in zip(entry.coords, entry.values):
        tile = codec.vae_decode(v.astype(np.float64), stride, CONFIG.codec_seed)
        canvas[y * fh : (y + 1) * fh, x * fw : (x + 1) * fw] = np.clip(tile, 0, 1)
        mask[y * fh : (y + 1) * fh, x * fw : (x + 1) * fw] = True
    return canvas, mask


@pytest.mark.parametrize("raw", ["CH_01", "CH_02", "OB_01"])
def test_memory_entity_keeps_appearance_after_jitter(raw):
    layout, stride = MemoryLayout(), 8
    cfg = BankConfig(layout=layout, vae_stride=stride)
    eid = EntityId.parse(raw)
    shot = parse_script(json.dumps({
        "story_name": "s", "story_overview": "o", "characters": [], "objects": [],
        "scenes": [{"id": "SC_01", "short_description": "park"}],
        "shots": [{"shot_num": 1, "abstract_prompt": f"[{raw}] in [SC_01].", "natural_prompt": "x"}],
    }), validate=False).shot(1)
    bank = EntityBank(cfg)
    frame, mask = reference_asset(eid, DESCRIPTIONS[eid], "studio backdrop", layout, stride)
    accept_candidate(bank, build_entry(frame, mask, eid, DESCRIPTIONS[eid], 0, PROVIDER, cfg))
    ref = PROVIDER.embed_appearance(*render_source(bank.entries[eid][0], layout, stride))
    moved = 0
    for seed in range(10):
        out = mock_shot_synthesizer(shot, retrieve_memory(bank, [eid]), DESCRIPTIONS, layout, seed, stride=stride)
        m = out.masks[eid][0]
        moved += not np.array_equal(m, render_source(bank.entries[eid][0], layout, stride)[1])
        assert float(ref @ PROVIDER.embed_appearance(out.frames[0], m)) >= 0.9
    assert moved > 0


def test_laplacian_variance_orders_sharpness():
    gen = np.random.default_rng(0)
    sharp = gen.random((32, 32, 3))
    blurred = (sharp + np.roll(sharp, 1, 0) + np.roll(sharp, 1, 1) + np.roll(sharp, (1, 1), (0, 1))) / 4
    assert laplacian_variance(sharp) > laplacian_variance(blurred)
    assert laplacian_variance(np.full((8, 8, 3), 0.3)) == 0.0


def test_select_keyframes_examples():
    frames = list(np.random.default_rng(1).random((5, 16, 16, 3)))
    scores = [laplacian_variance(f) for f in frames]
    assert select_keyframes(frames, 5) == sorted(range(5), key=lambda i: -scores[i])
    assert select_keyframes([np.zeros((8, 8, 3))] * 4, 3) == [0, 1, 2]
    assert select_keyframes(frames, 0) == []

    flat = [np.full((16, 16, 3), 0.5)] * 6
    sharp = np.zeros((16, 16, 3))
    sharp[::2, ::2] = 1.0
    assert select_keyframes(flat[:3] + [sharp] + flat[3:], 1) == [3]


def test_select_keyframes_invalid_k():
    frames = [np.zeros((4, 4, 3))] * 3
    for k in (-1, 4):
        with pytest.raises(InvalidK):
            select_keyframes(frames, k)
