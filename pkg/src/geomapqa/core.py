"""Shared domain types for geologic-map digitization and benchmark evaluation.

Pixel geometry convention: origin at the image's top-left corner, x grows
rightward, y grows downward. A box spans the half-open ranges
[x_min, x_max) x [y_min, y_max), so width = x_max - x_min and an integer
10x10 box covers exactly 100 pixels.
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

COMPONENT_KINDS = (
    "title",
    "scale",
    "legend",
    "main_map",
    "index_map",
    "cross_section",
    "stratigraphic_column",
    "other",
)
NAMED_COMPONENT_KINDS = COMPONENT_KINDS[:-1]

ABILITIES = ("extracting", "grounding", "referring", "reasoning", "analyzing")
QUESTION_TYPES = ("MCQ", "FITB", "EQ")
MCQ_LABELS = ("A", "B", "C", "D")
LANGUAGES = ("English", "Chinese")

EXTRACTING_TASKS = ("sheet_name", "scale", "lonlat", "index_map")
GROUNDING_BY_NAME_TASKS = tuple(f"{k}_by_name" for k in NAMED_COMPONENT_KINDS)
GROUNDING_BY_INTENTION_TASKS = tuple(f"{k}_by_intention" for k in NAMED_COMPONENT_KINDS)
GROUNDING_TASKS = GROUNDING_BY_NAME_TASKS + GROUNDING_BY_INTENTION_TASKS
REFERRING_TASKS = ("color_by_rock", "rock_by_color")
REASONING_TASKS = (
    "area_comparison",
    "fault_existence",
    "lithology_composition",
    "lonlat_localization",
)
ANALYZING_TASKS = ("earthquake_risk",)
ALL_TASKS = (
    EXTRACTING_TASKS + GROUNDING_TASKS + REFERRING_TASKS + REASONING_TASKS + ANALYZING_TASKS
)
assert len(ALL_TASKS) == 25

TASK_ABILITY: dict[str, str] = {}
TASK_ABILITY.update({t: "extracting" for t in EXTRACTING_TASKS})
TASK_ABILITY.update({t: "grounding" for t in GROUNDING_TASKS})
TASK_ABILITY.update({t: "referring" for t in REFERRING_TASKS})
TASK_ABILITY.update({t: "reasoning" for t in REASONING_TASKS})
TASK_ABILITY.update({t: "analyzing" for t in ANALYZING_TASKS})

TASK_QTYPE: dict[str, str] = {}
TASK_QTYPE.update({t: "FITB" for t in EXTRACTING_TASKS + GROUNDING_TASKS})
TASK_QTYPE.update({t: "MCQ" for t in REFERRING_TASKS + REASONING_TASKS})
TASK_QTYPE.update({t: "EQ" for t in ANALYZING_TASKS})

# FITB scoring routes: set-IoU tasks and plain exact-match tasks.
SET_FITB_TASKS = ("lonlat", "index_map")
EXACT_FITB_TASKS = ("sheet_name", "scale")

ANSWER_KINDS = ("choice_label", "text", "bbox", "name_set", "lonlat", "essay")

# Base-model system prompt shared by extraction, answering, and judging calls.
BASE_SYSTEM_PROMPT = "You are an expert in geology and cartography with a focus on geologic map."


def grounding_component(task: str) -> str:
    """Component kind targeted by a grounding task name."""
    if task.endswith("_by_name"):
        return task[: -len("_by_name")]
    if task.endswith("_by_intention"):
        return task[: -len("_by_intention")]
    raise ValueError(f"not a grounding task: {task}")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box. Construction is permissive; validity is checked
    via :meth:`violations` so malformed annotations can be reported as data."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def violations(self, label: str = "bbox") -> list[str]:
        out = []
        if not self.x_min < self.x_max:
            out.append(f"{label}: x_min ({self.x_min}) must be < x_max ({self.x_max})")
        if not self.y_min < self.y_max:
            out.append(f"{label}: y_min ({self.y_min}) must be < y_max ({self.y_max})")
        if min(self.x_min, self.y_min, self.x_max, self.y_max) < 0:
            out.append(f"{label}: coordinates must be >= 0")
        return out

    def is_valid(self) -> bool:
        return not self.violations()

    def require_valid(self, label: str = "bbox") -> None:
        bad = self.violations(label)
        if bad:
            raise ValueError("; ".join(bad))

    def intersection_area(self, other: "BBox") -> float:
        w = min(self.x_max, other.x_max) - max(self.x_min, other.x_min)
        h = min(self.y_max, other.y_max) - max(self.y_min, other.y_min)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def contains_box(self, other: "BBox", tol: float = 1e-9) -> bool:
        return (
            other.x_min >= self.x_min - tol
            and other.y_min >= self.y_min - tol
            and other.x_max <= self.x_max + tol
            and other.y_max <= self.y_max + tol
        )

    def translated(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def scaled(self, factor: float) -> "BBox":
        return BBox(
            self.x_min * factor, self.y_min * factor, self.x_max * factor, self.y_max * factor
        )

    def as_int_list(self) -> list[int]:
        return [int(round(v)) for v in (self.x_min, self.y_min, self.x_max, self.y_max)]

    def to_dict(self) -> dict[str, float]:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BBox":
        return cls(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))

    @classmethod
    def from_list(cls, vals: Sequence[float]) -> "BBox":
        x1, y1, x2, y2 = vals
        return cls(float(x1), float(y1), float(x2), float(y2))


@dataclass(frozen=True)
class LonLatRange:
    """Geographic rectangle in degrees. No antimeridian-crossing support."""

    west: float
    east: float
    south: float
    north: float

    @property
    def width(self) -> float:
        return self.east - self.west

    @property
    def height(self) -> float:
        return self.north - self.south

    @property
    def area(self) -> float:
        return self.width * self.height

    def violations(self, label: str = "lonlat") -> list[str]:
        out = []
        if not self.west < self.east:
            out.append(f"{label}: west ({self.west}) must be < east ({self.east})")
        if not self.south < self.north:
            out.append(f"{label}: south ({self.south}) must be < north ({self.north})")
        if not (-180.0 <= self.west and self.east <= 180.0):
            out.append(f"{label}: longitudes must lie in [-180, 180]")
        if not (-90.0 <= self.south and self.north <= 90.0):
            out.append(f"{label}: latitudes must lie in [-90, 90]")
        return out

    def is_valid(self) -> bool:
        return not self.violations()

    def require_valid(self, label: str = "lonlat") -> None:
        bad = self.violations(label)
        if bad:
            raise ValueError("; ".join(bad))

    def intersection_area(self, other: "LonLatRange") -> float:
        w = min(self.east, other.east) - max(self.west, other.west)
        h = min(self.north, other.north) - max(self.south, other.south)
        if w <= 0 or h <= 0:
            return 0.0
        return w * h

    def contains_point(self, lon: float, lat: float) -> bool:
        return self.west <= lon <= self.east and self.south <= lat <= self.north

    def to_dict(self) -> dict[str, float]:
        return {"west": self.west, "east": self.east, "south": self.south, "north": self.north}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LonLatRange":
        return cls(float(d["west"]), float(d["east"]), float(d["south"]), float(d["north"]))


@dataclass(frozen=True)
class Component:
    kind: str
    bbox: BBox
    confidence: float = 1.0
    info: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "bbox": self.bbox.to_dict(),
            "confidence": self.confidence,
            "info": dict(self.info),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Component":
        return cls(
            kind=str(d["kind"]),
            bbox=BBox.from_dict(d["bbox"]),
            confidence=float(d.get("confidence", 1.0)),
            info=dict(d.get("info", {})),
        )


@dataclass(frozen=True)
class LegendUnit:
    text_bbox: BBox
    color_bbox: BBox
    rock_name: Optional[str]
    color: tuple[int, int, int]
    lithology: Optional[str] = None
    stratigraphic_age: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "text_bbox": self.text_bbox.to_dict(),
            "color_bbox": self.color_bbox.to_dict(),
            "rock_name": self.rock_name,
            "color": list(self.color),
            "lithology": self.lithology,
            "stratigraphic_age": self.stratigraphic_age,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LegendUnit":
        return cls(
            text_bbox=BBox.from_dict(d["text_bbox"]),
            color_bbox=BBox.from_dict(d["color_bbox"]),
            rock_name=d.get("rock_name"),
            color=tuple(int(c) for c in d["color"]),
            lithology=d.get("lithology"),
            stratigraphic_age=d.get("stratigraphic_age"),
        )


@dataclass(frozen=True)
class MapMetadata:
    """Digitization product for one map. All fields optional except the
    collections; absent information is represented as None / empty."""

    sheet_name: Optional[str] = None
    scale: Optional[str] = None
    lonlat: Optional[LonLatRange] = None
    neighbors: tuple[str, ...] = ()
    components: tuple[Component, ...] = ()
    legend_units: tuple[LegendUnit, ...] = ()
    rock_areas: Mapping[str, float] = field(default_factory=dict)
    fault_grid: Optional[tuple[tuple[bool, ...], ...]] = None
    language: Optional[str] = None

    def component(self, kind: str) -> Optional[Component]:
        for c in self.components:
            if c.kind == kind:
                return c
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "sheet_name": self.sheet_name,
            "scale": self.scale,
            "lonlat": self.lonlat.to_dict() if self.lonlat else None,
            "neighbors": sorted(self.neighbors),
            "components": [c.to_dict() for c in self.components],
            "legend_units": [u.to_dict() for u in self.legend_units],
            "rock_areas": dict(sorted(self.rock_areas.items())),
            "fault_grid": [list(row) for row in self.fault_grid] if self.fault_grid else None,
            "language": self.language,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "MapMetadata":
        grid = d.get("fault_grid")
        return cls(
            sheet_name=d.get("sheet_name"),
            scale=d.get("scale"),
            lonlat=LonLatRange.from_dict(d["lonlat"]) if d.get("lonlat") else None,
            neighbors=tuple(sorted(d.get("neighbors") or ())),
            components=tuple(Component.from_dict(c) for c in d.get("components", ())),
            legend_units=tuple(LegendUnit.from_dict(u) for u in d.get("legend_units", ())),
            rock_areas=dict(d.get("rock_areas", {})),
            fault_grid=tuple(tuple(bool(v) for v in row) for row in grid) if grid else None,
            language=d.get("language"),
        )


@dataclass(frozen=True)
class MapDocument:
    """Identity record for one rasterized map."""

    map_id: str
    path: Optional[str] = None
    source: str = "synthetic"
    language: Optional[str] = None


@dataclass(frozen=True)
class AnswerValue:
    """Tagged union carried by ground truths and parsed model answers."""

    kind: str
    value: Any

    def __post_init__(self) -> None:
        if self.kind not in ANSWER_KINDS:
            raise ValueError(f"unknown answer kind: {self.kind}")
        if self.kind == "name_set":
            object.__setattr__(self, "value", tuple(sorted({str(v) for v in self.value})))

    @classmethod
    def choice(cls, label: str) -> "AnswerValue":
        return cls("choice_label", str(label))

    @classmethod
    def text(cls, s: str) -> "AnswerValue":
        return cls("text", str(s))

    @classmethod
    def bbox(cls, b: BBox) -> "AnswerValue":
        return cls("bbox", b)

    @classmethod
    def names(cls, names: Iterable[str]) -> "AnswerValue":
        return cls("name_set", tuple(names))

    @classmethod
    def lonlat(cls, r: LonLatRange) -> "AnswerValue":
        return cls("lonlat", r)

    @classmethod
    def essay(cls, s: str) -> "AnswerValue":
        return cls("essay", str(s))

    def to_dict(self) -> dict[str, Any]:
        if self.kind == "bbox":
            value = self.value.to_dict()
        elif self.kind == "lonlat":
            value = self.value.to_dict()
        elif self.kind == "name_set":
            value = list(self.value)
        else:
            value = self.value
        return {"kind": self.kind, "value": value}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "AnswerValue":
        kind = d["kind"]
        value = d["value"]
        if kind == "bbox":
            return cls(kind, BBox.from_dict(value))
        if kind == "lonlat":
            return cls(kind, LonLatRange.from_dict(value))
        if kind == "name_set":
            return cls(kind, tuple(value))
        return cls(kind, value)


def answer_to_text(av: AnswerValue) -> str:
    """Render an answer value the way a well-behaved model would write it."""
    if av.kind in ("text", "essay", "choice_label"):
        return str(av.value)
    if av.kind == "bbox":
        return "[" + ", ".join(str(v) for v in av.value.as_int_list()) + "]"
    if av.kind == "name_set":
        return ", ".join(av.value)
    if av.kind == "lonlat":
        r = av.value
        return ", ".join(repr(v) for v in (r.west, r.east, r.south, r.north))
    raise ValueError(f"unrenderable answer kind: {av.kind}")


def expected_answer_kind(task: str, qtype: str) -> str:
    """Answer shape a task's response must parse into."""
    if qtype == "MCQ":
        return "choice_label"
    if qtype == "EQ":
        return "essay"
    if task in GROUNDING_TASKS:
        return "bbox"
    if task == "lonlat":
        return "lonlat"
    if task == "index_map":
        return "name_set"
    return "text"


@dataclass(frozen=True)
class Choice:
    label: str
    text: str

    def to_dict(self) -> dict[str, str]:
        return {"label": self.label, "text": self.text}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Choice":
        return cls(str(d["label"]), str(d["text"]))


@dataclass(frozen=True)
class BenchItem:
    id: str
    map_id: str
    ability: str
    task: str
    qtype: str
    question_text: str
    choices: Optional[tuple[Choice, ...]] = None
    ground_truth: Optional[AnswerValue] = None

    def violations(self) -> list[str]:
        out = []
        if self.ability not in ABILITIES:
            out.append(f"{self.id}: unknown ability {self.ability!r}")
        if self.task not in ALL_TASKS:
            out.append(f"{self.id}: unknown task {self.task!r}")
        if self.qtype not in QUESTION_TYPES:
            out.append(f"{self.id}: unknown qtype {self.qtype!r}")
        if self.qtype == "MCQ":
            if not self.choices or len(self.choices) != 4:
                out.append(f"{self.id}: MCQ items need exactly 4 choices")
            elif self.ground_truth is None or self.ground_truth.value not in {
                c.label for c in self.choices
            }:
                out.append(f"{self.id}: MCQ ground truth must be one of the 4 labels")
        if self.ground_truth is not None:
            want = expected_answer_kind(self.task, self.qtype)
            if self.ground_truth.kind != want:
                out.append(
                    f"{self.id}: ground truth kind {self.ground_truth.kind!r}, expected {want!r}"
                )
        return out

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "map_id": self.map_id,
            "ability": self.ability,
            "task": self.task,
            "qtype": self.qtype,
            "question_text": self.question_text,
            "choices": [c.to_dict() for c in self.choices] if self.choices else None,
            "ground_truth": self.ground_truth.to_dict() if self.ground_truth else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BenchItem":
        choices = d.get("choices")
        gt = d.get("ground_truth")
        return cls(
            id=str(d["id"]),
            map_id=str(d["map_id"]),
            ability=str(d["ability"]),
            task=str(d["task"]),
            qtype=str(d["qtype"]),
            question_text=str(d["question_text"]),
            choices=tuple(Choice.from_dict(c) for c in choices) if choices else None,
            ground_truth=AnswerValue.from_dict(gt) if gt else None,
        )


def validate_metadata(meta: MapMetadata, image_size: tuple[int, int]) -> list[str]:
    """Check every metadata invariant against the image. Violations are data,
    not errors: an empty list means the metadata is accepted everywhere."""
    width, height = image_size
    image_box = BBox(0, 0, width, height)
    out: list[str] = []

    seen_named: dict[str, int] = {}
    for i, comp in enumerate(meta.components):
        label = f"components[{i}] ({comp.kind})"
        if comp.kind not in COMPONENT_KINDS:
            out.append(f"{label}: unknown component kind")
            continue
        out.extend(comp.bbox.violations(f"{label}.bbox"))
        if comp.bbox.is_valid() and not image_box.contains_box(comp.bbox):
            out.append(f"{label}.bbox: exceeds image bounds {width}x{height}")
        if not 0.0 <= comp.confidence <= 1.0:
            out.append(f"{label}: confidence {comp.confidence} outside [0, 1]")
        if comp.kind != "other":
            seen_named[comp.kind] = seen_named.get(comp.kind, 0) + 1
    for kind, n in sorted(seen_named.items()):
        if n > 1:
            out.append(f"components: {n} entries for kind {kind!r}, at most one allowed")

    legend = meta.component("legend")
    for i, unit in enumerate(meta.legend_units):
        label = f"legend_units[{i}]"
        out.extend(unit.text_bbox.violations(f"{label}.text_bbox"))
        out.extend(unit.color_bbox.violations(f"{label}.color_bbox"))
        if legend is not None and legend.bbox.is_valid():
            for name, box in (("text_bbox", unit.text_bbox), ("color_bbox", unit.color_bbox)):
                if box.is_valid() and not legend.bbox.contains_box(box):
                    out.append(f"{label}.{name}: outside the legend component bbox")
        elif legend is None:
            out.append(f"{label}: present without a legend component")
        if len(unit.color) != 3 or any(not 0 <= c <= 255 for c in unit.color):
            out.append(f"{label}: color channels must be integers in [0, 255]")

    total = 0.0
    for name, frac in sorted(meta.rock_areas.items()):
        if not 0.0 <= frac <= 1.0:
            out.append(f"rock_areas[{name!r}]: fraction {frac} outside [0, 1]")
        total += frac
    if total > 1.0 + 1e-6:
        out.append(f"rock_areas: fractions sum to {total:.6f}, must be <= 1.0")

    if meta.fault_grid is not None:
        rows = meta.fault_grid
        if len(rows) != 3 or any(len(r) != 3 for r in rows):
            out.append("fault_grid: must have exactly 3x3 cells")

    if meta.lonlat is not None:
        out.extend(meta.lonlat.violations("lonlat"))
    if meta.scale is not None:
        if not re.fullmatch(r"1:\d+", meta.scale):
            out.append(f"scale: {meta.scale!r} is not canonical '1:<digits>' form")
    if meta.language is not None and meta.language not in LANGUAGES:
        out.append(f"language: {meta.language!r} not in {LANGUAGES}")
    return out


def scaled_metadata(meta: MapMetadata, factor: float) -> MapMetadata:
    """Metadata with all pixel geometry rescaled, for pipelines operating on a
    resized rendition of the map. Non-geometric fields are unchanged."""
    if factor == 1.0:
        return meta
    components = tuple(
        Component(c.kind, c.bbox.scaled(factor), c.confidence, c.info) for c in meta.components
    )
    units = tuple(
        LegendUnit(
            u.text_bbox.scaled(factor),
            u.color_bbox.scaled(factor),
            u.rock_name,
            u.color,
            u.lithology,
            u.stratigraphic_age,
        )
        for u in meta.legend_units
    )
    return MapMetadata(
        sheet_name=meta.sheet_name,
        scale=meta.scale,
        lonlat=meta.lonlat,
        neighbors=meta.neighbors,
        components=components,
        legend_units=units,
        rock_areas=meta.rock_areas,
        fault_grid=meta.fault_grid,
        language=meta.language,
    )


def crop(image: np.ndarray, bbox: BBox) -> np.ndarray:
    """Cut the half-open pixel window of ``bbox`` out of ``image``.

    The crop's pixel (0, 0) equals the source pixel (x_min, y_min)."""
    height, width = image.shape[:2]
    x0, y0, x1, y1 = bbox.as_int_list()
    if x0 < 0:
        raise ValueError(f"crop x_min ({x0}) below 0")
    if y0 < 0:
        raise ValueError(f"crop y_min ({y0}) below 0")
    if x1 > width:
        raise ValueError(f"crop x_max ({x1}) exceeds image width {width}")
    if y1 > height:
        raise ValueError(f"crop y_max ({y1}) exceeds image height {height}")
    if x0 >= x1:
        raise ValueError(f"crop x_min ({x0}) must be < x_max ({x1})")
    if y0 >= y1:
        raise ValueError(f"crop y_min ({y0}) must be < y_max ({y1})")
    return np.ascontiguousarray(image[y0:y1, x0:x1])


def downscale_max_edge(image: np.ndarray, max_edge: int) -> tuple[np.ndarray, float]:
    """Shrink an image so its longest edge is <= max_edge.

    Returns (image, factor); factor is 1.0 when no resize was needed. Nearest
    neighbour keeps the output deterministic across platforms."""
    height, width = image.shape[:2]
    longest = max(height, width)
    if longest <= max_edge:
        return image, 1.0
    factor = max_edge / longest
    new_w = max(1, int(round(width * factor)))
    new_h = max(1, int(round(height * factor)))
    pil = Image.fromarray(image).resize((new_w, new_h), Image.NEAREST)
    return np.asarray(pil), factor


def load_image(path: str) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def save_image(image: np.ndarray, path: str) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path, format="PNG", optimize=False)
