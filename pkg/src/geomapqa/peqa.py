"""Prompt-enhanced question answering: assemble the QA prompt from digitized
metadata, injected knowledge, and relevant component crops, invoke the
backend, and parse the {reason, answer} reply.

Ablation toggles swap stages out: HIE off renders "Extracted information:
none", DKI off injects nothing, and with the prompt extras off the model gets
the whole image and the bare question only.
"""
from __future__ import annotations

import json
import logging
import re
import time
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np

from .backend import Backend, BackendError, CompletionRequest, ImageAttachment
from .core import (
    BASE_SYSTEM_PROMPT,
    BBox,
    AnswerValue,
    BenchItem,
    GROUNDING_TASKS,
    LonLatRange,
    MapMetadata,
    crop,
    downscale_max_edge,
    expected_answer_kind,
)
from .dki import ExpertGroup, KnowledgePacket, KnowledgeSources, consult, gate

logger = logging.getLogger(__name__)

QA_TYPE_NAMES = {"MCQ": "multiple-choice", "FITB": "fill-in-the-blank", "EQ": "essay"}

QA_INSTRUCTION_TEMPLATE = (
    "Extracted information: {information}\n"
    "Injected knowledge: {knowledge}\n"
    "This is a {qtype} question.\n"
    "Based on the provided text and image, reason and answer the question in "
    'JSON format only, for example: {{"reason": "XXX", "answer": "XXX"}}\n'
    "\n"
    "Question:\n"
    "{question}\n"
    "Answer: "
)

# task -> component kinds attached alongside the question ("__full__" is the
# downscaled whole image). Missing components drop silently.
CROP_ROUTING: dict[str, tuple[str, ...]] = {
    "sheet_name": ("title",),
    "scale": ("scale",),
    "lonlat": ("index_map", "main_map"),
    "index_map": ("index_map", "main_map"),
    "color_by_rock": ("legend",),
    "rock_by_color": ("legend",),
    "area_comparison": ("main_map", "legend"),
    "fault_existence": ("main_map", "legend"),
    "lithology_composition": ("main_map", "legend"),
    "lonlat_localization": ("index_map", "main_map"),
    "earthquake_risk": ("__full__", "main_map"),
}
CROP_ROUTING.update({task: ("__full__",) for task in GROUNDING_TASKS})

MAX_ATTACHMENTS = 6


class ResponseParseError(RuntimeError):
    """The raw model reply yielded no answer of the expected shape."""


@dataclass(frozen=True)
class QAPrompt:
    system: str
    images: tuple[ImageAttachment, ...]
    instruction: str


@dataclass(frozen=True)
class ParsedAnswer:
    reason: str
    answer: Optional[AnswerValue]
    raw: str
    parse_path: str = "strict"


@dataclass(frozen=True)
class Toggles:
    """Pipeline stage switches for ablation runs."""

    hie: bool = True
    dki: bool = True
    peqa: bool = True

    @classmethod
    def parse(cls, spec: str) -> "Toggles":
        token = spec.strip().casefold()
        if token in ("all", "hie+dki+peqa"):
            return cls(True, True, True)
        if token == "none":
            return cls(False, False, False)
        parts = {p.strip() for p in token.split("+") if p.strip()}
        unknown = parts - {"hie", "dki", "peqa"}
        if unknown:
            raise ValueError(f"unknown toggle name(s): {sorted(unknown)}")
        return cls("hie" in parts, "dki" in parts, "peqa" in parts)

    def label(self) -> str:
        names = [n for n, on in (("HIE", self.hie), ("DKI", self.dki), ("PEQA", self.peqa)) if on]
        return "+".join(names) if names else "none"


def render_question(item: BenchItem) -> str:
    """Question text plus labeled options for multiple-choice items."""
    if item.qtype == "MCQ" and item.choices:
        options = "\n".join(f"{c.label}. {c.text}" for c in item.choices)
        return f"{item.question_text}\n{options}"
    return item.question_text


def render_information(meta: Optional[MapMetadata]) -> str:
    """Single-line compact JSON view of the digitized metadata, or "none"."""
    if meta is None:
        return "none"
    doc: dict[str, Any] = {}
    if meta.sheet_name:
        doc["sheet_name"] = meta.sheet_name
    if meta.scale:
        doc["scale"] = meta.scale
    if meta.lonlat:
        doc["lonlat"] = meta.lonlat.to_dict()
    if meta.neighbors:
        doc["neighbors"] = sorted(meta.neighbors)
    if meta.language:
        doc["language"] = meta.language
    if meta.components:
        doc["components"] = {c.kind: c.bbox.as_int_list() for c in meta.components}
    if meta.legend_units:
        doc["legend"] = [
            {"rock_name": u.rock_name, "color": "#%02X%02X%02X" % u.color}
            for u in meta.legend_units
        ]
    if not doc:
        return "none"
    return json.dumps(doc, ensure_ascii=False, sort_keys=True)


def render_knowledge(knowledge: Optional[KnowledgePacket]) -> str:
    if knowledge is None or not knowledge.entries:
        return "none"
    return json.dumps(knowledge.render(), ensure_ascii=False, sort_keys=True)


def select_crops(
    item: BenchItem,
    meta: Optional[MapMetadata],
    image: np.ndarray,
    *,
    max_edge: int = 2048,
    cap: int = MAX_ATTACHMENTS,
) -> list[ImageAttachment]:
    """Apply the task->component routing table. Components missing from the
    metadata drop silently; every attachment is downscaled to the edge cap."""
    wanted = CROP_ROUTING.get(item.task, ("__full__",))
    attachments: list[ImageAttachment] = []
    for kind in wanted:
        if len(attachments) >= cap:
            break
        if kind == "__full__":
            scaled, _ = downscale_max_edge(image, max_edge)
            attachments.append(ImageAttachment.from_array(f"{item.map_id}:full", scaled))
            continue
        component = meta.component(kind) if meta else None
        if component is None or not component.bbox.is_valid():
            continue
        height, width = image.shape[:2]
        box = BBox(
            max(0.0, component.bbox.x_min),
            max(0.0, component.bbox.y_min),
            min(float(width), component.bbox.x_max),
            min(float(height), component.bbox.y_max),
        )
        if not box.is_valid():
            continue
        sub = crop(image, box)
        scaled, _ = downscale_max_edge(sub, max_edge)
        attachments.append(ImageAttachment.from_array(f"{item.map_id}:{kind}", scaled))
    if not attachments:
        scaled, _ = downscale_max_edge(image, max_edge)
        attachments.append(ImageAttachment.from_array(f"{item.map_id}:full", scaled))
    return attachments


def build_prompt(
    item: BenchItem,
    meta: Optional[MapMetadata],
    knowledge: Optional[KnowledgePacket],
    crops: Sequence[ImageAttachment],
) -> QAPrompt:
    """Instantiate the QA template: extracted information, injected knowledge,
    the question-type sentence, the JSON-format instruction with its example
    answer, the question, and the Answer terminator."""
    instruction = QA_INSTRUCTION_TEMPLATE.format(
        information=render_information(meta),
        knowledge=render_knowledge(knowledge),
        qtype=QA_TYPE_NAMES[item.qtype],
        question=render_question(item),
    )
    return QAPrompt(system=BASE_SYSTEM_PROMPT, images=tuple(crops), instruction=instruction)


# ---------------------------------------------------------------------------
# response parsing


_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)
_BBOX_RE = re.compile(
    r"\[?\s*(-?\d+(?:\.\d+)?)\s*[,;\s]\s*(-?\d+(?:\.\d+)?)\s*[,;\s]\s*"
    r"(-?\d+(?:\.\d+)?)\s*[,;\s]\s*(-?\d+(?:\.\d+)?)\s*\]?"
)
_LETTER_RE = re.compile(r"\b([A-Da-d])\b")


def _json_candidates(raw: str):
    yield "strict", raw
    m = _FENCE_RE.search(raw)
    if m:
        yield "fenced", m.group(1)
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        yield "braces", raw[start : end + 1]


def _coerce_answer(value: Any, shape: str) -> AnswerValue:
    if shape == "choice_label":
        text = str(value).strip()
        m = _LETTER_RE.search(text)
        if not m:
            raise ResponseParseError(f"no choice letter in {text!r}")
        return AnswerValue.choice(m.group(1).upper())
    if shape == "bbox":
        if isinstance(value, (list, tuple)) and len(value) == 4:
            nums = [float(v) for v in value]
        else:
            m = _BBOX_RE.search(str(value))
            if not m:
                raise ResponseParseError(f"no bounding box in {value!r}")
            nums = [float(g) for g in m.groups()]
        return AnswerValue.bbox(BBox.from_list(nums))
    if shape == "name_set":
        if isinstance(value, (list, tuple)):
            names = [str(v) for v in value]
        else:
            names = [p.strip() for p in re.split(r"[,;、，]", str(value)) if p.strip()]
        if not names:
            raise ResponseParseError("empty name set")
        return AnswerValue.names(names)
    if shape == "lonlat":
        nums = re.findall(r"-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?", str(value))
        if isinstance(value, (list, tuple)) and len(value) == 4:
            vals = [float(v) for v in value]
        elif len(nums) >= 4:
            vals = [float(n) for n in nums[:4]]
        else:
            raise ResponseParseError(f"no lon-lat range in {value!r}")
        west, east, south, north = vals
        return AnswerValue.lonlat(LonLatRange(west, east, south, north))
    if shape == "essay":
        return AnswerValue.essay(str(value))
    return AnswerValue.text(str(value))


def parse_response(raw: str, expected_shape: str) -> ParsedAnswer:
    """Parse a model reply into the expected answer shape.

    Strict JSON with reason/answer keys is preferred; fallbacks run in order:
    fenced-block extraction, first-to-last-brace slice, a four-number regex
    for grounding, and single-letter extraction for multiple choice."""
    for path, candidate in _json_candidates(raw):
        try:
            doc = json.loads(candidate)
        except (json.JSONDecodeError, TypeError):
            continue
        if not isinstance(doc, dict) or "answer" not in doc:
            continue
        try:
            answer = _coerce_answer(doc["answer"], expected_shape)
        except ResponseParseError:
            continue
        return ParsedAnswer(
            reason=str(doc.get("reason", "")), answer=answer, raw=raw, parse_path=path
        )
    if expected_shape == "bbox":
        m = _BBOX_RE.search(raw)
        if m:
            nums = [float(g) for g in m.groups()]
            return ParsedAnswer(
                reason="", answer=AnswerValue.bbox(BBox.from_list(nums)), raw=raw,
                parse_path="bbox_regex",
            )
    if expected_shape == "choice_label":
        m = _LETTER_RE.search(raw)
        if m:
            return ParsedAnswer(
                reason="", answer=AnswerValue.choice(m.group(1).upper()), raw=raw,
                parse_path="letter",
            )
    if expected_shape == "essay" and raw.strip():
        return ParsedAnswer(reason="", answer=AnswerValue.essay(raw.strip()), raw=raw,
                            parse_path="prose")
    raise ResponseParseError(f"no parseable {expected_shape} answer in reply")


# ---------------------------------------------------------------------------
# end-to-end answering


def answer(
    item: BenchItem,
    map_image: np.ndarray,
    meta: Optional[MapMetadata],
    backend: Backend,
    *,
    toggles: Toggles = Toggles(),
    group: Optional[ExpertGroup] = None,
    sources: Optional[KnowledgeSources] = None,
    max_edge: int = 2048,
) -> tuple[ParsedAnswer, dict[str, Any]]:
    """Answer one bench item end to end and return (parsed answer, audit
    record). Toggles only change prompt content: HIE off drops the metadata,
    DKI off drops the knowledge, prompt extras off sends the whole image with
    the bare question."""
    meta_on = meta if toggles.hie else None
    knowledge: Optional[KnowledgePacket] = None
    if toggles.dki and group is not None and sources is not None:
        kinds = gate(item, group, backend, map_image=None)
        if kinds:
            knowledge = consult(group, kinds, meta_on, sources)

    if toggles.peqa:
        crops = select_crops(item, meta_on, map_image, max_edge=max_edge)
        prompt = build_prompt(item, meta_on, knowledge, crops)
    else:
        scaled, _ = downscale_max_edge(map_image, max_edge)
        crops = [ImageAttachment.from_array(f"{item.map_id}:full", scaled)]
        lines = []
        if meta_on is not None:
            lines.append(f"Extracted information: {render_information(meta_on)}")
        if knowledge is not None and knowledge.entries:
            lines.append(f"Injected knowledge: {render_knowledge(knowledge)}")
        lines.append(render_question(item))
        prompt = QAPrompt(BASE_SYSTEM_PROMPT, tuple(crops), "\n".join(lines))

    audit: dict[str, Any] = {
        "item_id": item.id,
        "toggles": toggles.label(),
        "system": prompt.system,
        "instruction": prompt.instruction,
        "images": [{"name": a.name, "bytes": len(a.png)} for a in prompt.images],
        "elapsed_ms": 0.0,
    }
    shape = expected_answer_kind(item.task, item.qtype)
    req = CompletionRequest(
        system=prompt.system,
        instruction=prompt.instruction,
        images=prompt.images,
        json_mode=toggles.peqa,
    )
    try:
        t0 = time.monotonic()
        raw = backend.complete(req)
        # mocks keep elapsed_ms at 0.0 so reruns stay byte-identical
        if backend.records_latency:
            audit["elapsed_ms"] = (time.monotonic() - t0) * 1000.0
    except BackendError as exc:
        audit.update({"raw_response": None, "parse_path": None, "answer": None, "error": str(exc)})
        return ParsedAnswer(reason="", answer=None, raw="", parse_path="backend_error"), audit

    audit["raw_response"] = raw
    try:
        parsed = parse_response(raw, shape)
    except ResponseParseError as exc:
        audit.update({"parse_path": "parse_error", "answer": None, "error": str(exc)})
        return ParsedAnswer(reason="", answer=None, raw=raw, parse_path="parse_error"), audit
    audit.update(
        {"parse_path": parsed.parse_path, "answer": parsed.answer.to_dict(), "error": None}
    )
    return parsed, audit
