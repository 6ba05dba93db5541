"""Synthetic stories and reference assets for demos, scripts and tests."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from entmem.script import EntityId, parse_script, serialize_script
from entmem.synth import background, procedural_entity
from entmem.tensors import MemoryLayout, write_mask, write_tensor

BOY_AND_DOG = """{
  "story_name": "Boy and Dog",
  "story_overview": "A boy plays with his dog.",
  "characters": [
    {"id": "CH_01", "short_description": "young boy smiling"},
    {"id": "CH_02", "short_description": "small happy dog"}
  ],
  "objects": [
    {"id": "OB_01", "short_description": "red ball"}
  ],
  "scenes": [
    {"id": "SC_01", "short_description": "green park with pine trees"}
  ],
  "shots": [
    {
      "shot_num": 1,
      "abstract_prompt": "[CH_01] plays with [CH_02] in [SC_01] using [OB_01].",
      "natural_prompt": "young boy smiling plays with small happy dog in green park with pine trees throwing red ball.",
      "first_frame_prompt": "boy throws ball in green park, dog runs."
    }
  ]
}
"""

_DEMO_ENTITIES = {
    "characters": [("CH_01", "young boy smiling"), ("CH_02", "small happy dog")],
    "objects": [("OB_01", "red ball")],
    "scenes": [("SC_01", "green park with pine trees"), ("SC_02", "cozy living room with a fireplace")],
}

_DEMO_SHOTS = [
    "[CH_01] runs through [SC_01].",
    "[CH_01] throws [OB_01] to [CH_02] in [SC_01].",
    "[CH_02] chases [OB_01] across [SC_01].",
    "[CH_01] and [CH_02] rest inside [SC_02].",
    "[CH_02] sleeps by the fire in [SC_02].",
    "[CH_01] finds [OB_01] under the sofa in [SC_02].",
    "[CH_01] walks [CH_02] back to [SC_01].",
    "[CH_02] digs near a tree in [SC_01].",
    "[CH_01] and [CH_02] play with [OB_01] in [SC_01].",
    "[CH_01] waves goodbye in [SC_02].",
]


def demo_script_text(n_shots: int = 10) -> str:
    doc = {"story_name": "Park Day", "story_overview": "A boy and his dog spend a day between the park and home."}
    for section, items in _DEMO_ENTITIES.items():
        doc[section] = [{"id": i, "short_description": d} for i, d in items]
    doc["shots"] = [
        {
            "shot_num": k + 1,
            "abstract_prompt": _DEMO_SHOTS[k % len(_DEMO_SHOTS)],
            "natural_prompt": _DEMO_SHOTS[k % len(_DEMO_SHOTS)].replace("[", "").replace("]", ""),
        }
        for k in range(n_shots)
    ]
    return serialize_script(parse_script(json.dumps(doc)))


def reference_asset(entity: EntityId, description: str, scene_text: str, layout: MemoryLayout, stride: int = 8):
    """A procedural entity composited over a background: ``(frame, mask)``."""
    h, w = layout.h * stride, layout.w * stride
    frame = background(scene_text, h, w, stride).copy()
    rgb, mask = procedural_entity(entity, description, h, w, stride)
    frame[mask] = rgb[mask]
    return frame, mask


def write_demo(out_dir, n_shots: int = 10, layout: MemoryLayout | None = None, stride: int = 8, **overrides) -> Path:
    """Write script, reference assets and ``config.json``; returns the config path."""
    out = Path(out_dir)
    (out / "refs").mkdir(parents=True, exist_ok=True)
    layout = layout or MemoryLayout()
    (out / "story.json").write_text(demo_script_text(n_shots))
    refs = []
    for raw, desc in [*_DEMO_ENTITIES["characters"], *_DEMO_ENTITIES["objects"]]:
        frame, mask = reference_asset(EntityId.parse(raw), desc, "studio backdrop", layout, stride)
        write_tensor(out / "refs" / f"{raw}.emvt", frame)
        write_mask(out / "refs" / f"{raw}.emvm", mask)
        refs.append({"entity": raw, "frame": f"refs/{raw}.emvt", "mask": f"refs/{raw}.emvm"})
    config = {
        "script": "story.json",
        "output_dir": "run",
        "seed": 7,
        "steps": 4,
        "bank": {"layout": {"m": 1, "c": layout.c, "h": layout.h, "w": layout.w, "ph": layout.ph, "pw": layout.pw},
                 "vae_stride": stride},
        "references": refs,
    }
    config.update(overrides)
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return out / "config.json"


def write_coverage_story(out_dir, costs=(30, 30, 27, 27), n_shots: int = 10, layout: MemoryLayout | None = None,
                         stride: int = 8) -> Path:
    """Four entities with rectangular, patch-aligned references of the given token costs.

    Every shot references all four, and bank updates are disabled, so each
    shot conditions on exactly four memory slots covering ``sum(costs)``
    cells out of ``4 * tokens_per_slot``.
    """
    out = Path(out_dir)
    (out / "refs").mkdir(parents=True, exist_ok=True)
    layout = layout or MemoryLayout()
    ids = ["CH_01", "CH_02", "OB_01", "OB_02"]
    descs = ["tall knight in silver armour", "old wizard in blue robe", "golden lantern", "wooden chest"]
    doc = {
        "story_name": "Coverage",
        "story_overview": "Four recurring entities in every shot.",
        "characters": [{"id": i, "short_description": d} for i, d in zip(ids[:2], descs[:2])],
        "objects": [{"id": i, "short_description": d} for i, d in zip(ids[2:], descs[2:])],
        "scenes": [{"id": "SC_01", "short_description": "stone hall"}],
        "shots": [
            {"shot_num": k + 1, "abstract_prompt": "[CH_01] and [CH_02] carry [OB_01] and [OB_02] through [SC_01].",
             "natural_prompt": "knight and wizard carry a lantern and a chest through a stone hall."}
            for k in range(n_shots)
        ],
    }
    (out / "story.json").write_text(serialize_script(parse_script(json.dumps(doc))))
    h, w = layout.h * stride, layout.w * stride
    fh, fw = layout.ph * stride, layout.pw * stride
    refs = []
    for k, (raw, desc, cost) in enumerate(zip(ids, descs, costs)):
        cols = min(cost, layout.grid_w)
        mask = np.zeros((h, w), dtype=bool)
        for t in range(cost):
            y, x = divmod(t, cols)
            mask[y * fh : (y + 1) * fh, x * fw : (x + 1) * fw] = True
        frame = background("stone hall", h, w, stride).copy()
        rgb, _ = procedural_entity(EntityId.parse(raw), desc, h, w, stride)
        frame[mask] = rgb[mask]
        write_tensor(out / "refs" / f"{raw}.emvt", frame)
        write_mask(out / "refs" / f"{raw}.emvm", mask)
        refs.append({"entity": raw, "frame": f"refs/{raw}.emvt", "mask": f"refs/{raw}.emvm"})
    config = {
        "script": "story.json",
        "output_dir": "run",
        "update_every": 0,
        "bank": {"layout": {"m": 1, "c": layout.c, "h": layout.h, "w": layout.w, "ph": layout.ph, "pw": layout.pw},
                 "vae_stride": stride, "token_budget": max(costs)},
        "references": refs,
    }
    (out / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return out / "config.json"
