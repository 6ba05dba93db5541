"""Structured multi-shot story scripts.

A script declares characters, objects and scenes once, each under an id
such as ``CH_01``; shot prompts reference them in brackets (``[CH_01]``).
Attribute-level entities extend an id with a lowercase suffix, e.g.
``CH_01_blue_tshirt``.
"""

from __future__ import annotations

import enum
import json
import re
import warnings
from dataclasses import dataclass, field
from typing import Any

from entmem.errors import EntmemError


class ScriptSyntaxError(EntmemError, ValueError):
    """The document is not parseable JSON."""


class SchemaError(EntmemError, ValueError):
    """A required field is missing or has the wrong type."""


class ValidationError(EntmemError, ValueError):
    def __init__(self, diagnostics: list[str]):
        super().__init__("; ".join(diagnostics))
        self.diagnostics = diagnostics


class UnknownTokenWarning(UserWarning):
    pass


class Category(enum.Enum):
    CHARACTER = "CH"
    OBJECT = "OB"
    SCENE = "SC"


SECTION_CATEGORY = {
    "characters": Category.CHARACTER,
    "objects": Category.OBJECT,
    "scenes": Category.SCENE,
}

ID_RE = re.compile(r"^(CH|OB|SC)_(\d{2})((?:_[a-z0-9]+)*)$")
BRACKET_RE = re.compile(r"\[([^\[\]\s]+)\]")


@dataclass(frozen=True, order=True)
class EntityId:
    raw: str
    category: Category = field(compare=False)
    index: int = field(compare=False)
    suffix: str | None = field(compare=False, default=None)

    @classmethod
    def parse(cls, raw: str) -> "EntityId":
        m = ID_RE.match(raw)
        if not m:
            raise ValueError(f"invalid entity id {raw!r}")
        index = int(m.group(2))
        if index < 1:
            raise ValueError(f"entity index must be positive in {raw!r}")
        suffix = m.group(3)[1:] or None
        return cls(raw, Category(m.group(1)), index, suffix)

    @property
    def is_scene(self) -> bool:
        return self.category is Category.SCENE

    def __str__(self) -> str:
        return self.raw


@dataclass(frozen=True)
class EntityDecl:
    id: EntityId
    short_description: str


@dataclass(frozen=True)
class Shot:
    shot_num: int
    abstract_prompt: str
    natural_prompt: str
    first_frame_prompt: str | None = None

    @property
    def entity_refs(self) -> list[EntityId]:
        return extract_entity_refs(self.abstract_prompt)


@dataclass(frozen=True)
class StoryScript:
    story_name: str
    story_overview: str
    characters: tuple[EntityDecl, ...] = ()
    objects: tuple[EntityDecl, ...] = ()
    scenes: tuple[EntityDecl, ...] = ()
    shots: tuple[Shot, ...] = ()

    def declarations(self) -> list[EntityDecl]:
        return [*self.characters, *self.objects, *self.scenes]

    def entities(self) -> dict[EntityId, EntityDecl]:
        return {d.id: d for d in self.declarations()}

    def description(self, entity: EntityId) -> str:
        return self.entities()[entity].short_description

    def shot(self, shot_num: int) -> Shot:
        for s in self.shots:
            if s.shot_num == shot_num:
                return s
        raise KeyError(f"no shot {shot_num}")


def scan_entity_refs(prompt: str) -> tuple[list[EntityId], list[str]]:
    """Bracketed ids in first-occurrence order, plus tokens that are not ids."""
    refs: list[EntityId] = []
    seen: set[str] = set()
    unknown: list[str] = []
    for m in BRACKET_RE.finditer(prompt):
        token = m.group(1)
        try:
            eid = EntityId.parse(token)
        except ValueError:
            unknown.append(token)
            continue
        if eid.raw not in seen:
            seen.add(eid.raw)
            refs.append(eid)
    return refs, unknown


def extract_entity_refs(prompt: str) -> list[EntityId]:
    refs, unknown = scan_entity_refs(prompt)
    for token in unknown:
        warnings.warn(f"ignoring unrecognized bracketed token [{token}]", UnknownTokenWarning, stacklevel=2)
    return refs


def _require(obj: dict, key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if key not in obj:
        raise SchemaError(f"{where}: missing required field {key!r}")
    value = obj[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        raise SchemaError(f"{where}: field {key!r} has type {type(value).__name__}")
    return value


def _parse_decl(obj: Any, where: str) -> EntityDecl:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    raw = _require(obj, "id", str, where)
    desc = _require(obj, "short_description", str, where)
    try:
        eid = EntityId.parse(raw)
    except ValueError as exc:
        raise SchemaError(f"{where}: {exc}") from None
    return EntityDecl(eid, desc)


def _parse_shot(obj: Any, where: str) -> Shot:
    if not isinstance(obj, dict):
        raise SchemaError(f"{where}: expected an object")
    num = _require(obj, "shot_num", int, where)
    abstract = _require(obj, "abstract_prompt", str, where)
    natural = _require(obj, "natural_prompt", str, where)
    first = obj.get("first_frame_prompt")
    if first is not None and not isinstance(first, str):
        raise SchemaError(f"{where}: field 'first_frame_prompt' must be a string")
    return Shot(num, abstract, natural, first)


def parse_script(text: str | bytes, validate: bool = True) -> StoryScript:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScriptSyntaxError(f"not UTF-8: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScriptSyntaxError(f"line {exc.lineno} col {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise SchemaError("top level must be an object")

    name = _require(doc, "story_name", str, "script")
    overview = _require(doc, "story_overview", str, "script")
    sections = {}
    for key in SECTION_CATEGORY:
        items = _require(doc, key, list, "script")
        sections[key] = tuple(_parse_decl(o, f"{key}[{i}]") for i, o in enumerate(items))
    shots = _require(doc, "shots", list, "script")
    script = StoryScript(
        story_name=name,
        story_overview=overview,
        shots=tuple(_parse_shot(o, f"shots[{i}]") for i, o in enumerate(shots)),
        **sections,
    )
    if validate:
        diagnostics = validate_script(script)
        if diagnostics:
            raise ValidationError(diagnostics)
    return script


def validate_script(script: StoryScript) -> list[str]:
    out: list[str] = []
    seen: set[str] = set()
    for section, category in SECTION_CATEGORY.items():
        for decl in getattr(script, section):
            if decl.id.raw in seen:
                out.append(f"duplicate id {decl.id.raw}")
            seen.add(decl.id.raw)
            if decl.id.category is not category:
                out.append(f"{decl.id.raw} declared under {section}")
            if not decl.short_description.strip():
                out.append(f"{decl.id.raw} has an empty short_description")

    for k, shot in enumerate(script.shots):
        if shot.shot_num != k + 1:
            out.append(
                f"non-contiguous shot numbering: shot at position {k + 1} has shot_num {shot.shot_num}"
            )
            break
    for shot in script.shots:
        refs, _ = scan_entity_refs(shot.abstract_prompt)
        for ref in refs:
            if ref.raw not in seen:
                out.append(f"shot {shot.shot_num} references undeclared {ref.raw}")
    return out


def script_to_dict(script: StoryScript) -> dict:
    def decls(items):
        return [{"id": d.id.raw, "short_description": d.short_description} for d in items]

    shots = []
    for s in script.shots:
        d = {"shot_num": s.shot_num, "abstract_prompt": s.abstract_prompt, "natural_prompt": s.natural_prompt}
        if s.first_frame_prompt is not None:
            d["first_frame_prompt"] = s.first_frame_prompt
        shots.append(d)
    return {
        "story_name": script.story_name,
        "story_overview": script.story_overview,
        "characters": decls(script.characters),
        "objects": decls(script.objects),
        "scenes": decls(script.scenes),
        "shots": shots,
    }


def serialize_script(script: StoryScript) -> str:
    return json.dumps(script_to_dict(script), indent=2, ensure_ascii=False) + "\n"
