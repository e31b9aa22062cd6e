"""Domain knowledge injection: gate which expert knowledge a question needs,
then consult the expert group through the tool pool.

External services are file-backed snapshots with fixed query semantics:

* earthquake catalog: CSV with header ``lon,lat,mag,year,depth`` (depth may be
  empty); queries keep magnitude > 2.5, year >= 1970, epicenter inside the
  lon-lat range, sorted by descending magnitude;
* active faults: JSON ``{"faults": [{"polyline": [[lon, lat], ...],
  "slip_type": ...}]}``; a fault qualifies when any segment intersects the
  query rectangle;
* rasters (population density, land cover): a flat binary grid next to a JSON
  geotransform sidecar ``{"west", "north", "cell_size_deg", "width",
  "height", "dtype"}``, row 0 at the northern edge.

Geographer and seismologist kinds are geo-keyed: they need the map's lon-lat
range and are skipped with a warning when it is absent. Geologist kinds are
global tables shipped with the package.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .backend import Backend, BackendError, CompletionRequest, ImageAttachment
from .core import BASE_SYSTEM_PROMPT, BenchItem, LonLatRange, MapMetadata

logger = logging.getLogger(__name__)

QUAKE_MIN_MAGNITUDE = 2.5  # strict inequality
QUAKE_MIN_YEAR = 1970


class ToolError(RuntimeError):
    """A tool-pool lookup failed (most often a missing snapshot file)."""


# ---------------------------------------------------------------------------
# records and snapshots


@dataclass(frozen=True)
class QuakeRecord:
    lon: float
    lat: float
    magnitude: float
    year: int
    depth: Optional[float] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "lon": self.lon,
            "lat": self.lat,
            "magnitude": self.magnitude,
            "year": self.year,
            "depth": self.depth,
        }


@dataclass(frozen=True)
class FaultRecord:
    polyline: tuple[tuple[float, float], ...]
    slip_type: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {"polyline": [list(p) for p in self.polyline], "slip_type": self.slip_type}


@dataclass(frozen=True)
class Raster:
    """North-up regular grid; row 0 spans the northern edge, column 0 the
    western edge. Cell (i, j) has its center at
    (west + (j + 0.5) * cell, north - (i + 0.5) * cell)."""

    grid: np.ndarray
    west: float
    north: float
    cell_size_deg: float

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]


def load_quakes(path: str) -> list[QuakeRecord]:
    p = Path(path)
    if not p.exists():
        raise ToolError(f"earthquake snapshot missing: {p}")
    records = []
    with p.open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            depth = row.get("depth") or None
            records.append(
                QuakeRecord(
                    lon=float(row["lon"]),
                    lat=float(row["lat"]),
                    magnitude=float(row["mag"]),
                    year=int(row["year"]),
                    depth=float(depth) if depth else None,
                )
            )
    return records


def load_faults(path: str) -> list[FaultRecord]:
    p = Path(path)
    if not p.exists():
        raise ToolError(f"fault snapshot missing: {p}")
    data = json.loads(p.read_text(encoding="utf-8"))
    return [
        FaultRecord(
            polyline=tuple((float(x), float(y)) for x, y in f["polyline"]),
            slip_type=f.get("slip_type"),
        )
        for f in data["faults"]
    ]


def load_raster(bin_path: str) -> Raster:
    p = Path(bin_path)
    sidecar = p.with_suffix(".json")
    if not p.exists():
        raise ToolError(f"raster snapshot missing: {p}")
    if not sidecar.exists():
        raise ToolError(f"raster geotransform sidecar missing: {sidecar}")
    meta = json.loads(sidecar.read_text(encoding="utf-8"))
    dtype = np.dtype(meta.get("dtype", "float32"))
    grid = np.fromfile(p, dtype=dtype).reshape(int(meta["height"]), int(meta["width"]))
    return Raster(
        grid=grid,
        west=float(meta["west"]),
        north=float(meta["north"]),
        cell_size_deg=float(meta["cell_size_deg"]),
    )


# ---------------------------------------------------------------------------
# lithology and stratigraphy tables


@dataclass(frozen=True)
class LithologyTable:
    """Three-level rock classification: (class, subclass, lithology) rows.
    Class order in the file is the declared tie-break order."""

    language: str
    rows: tuple[tuple[str, str, str], ...]

    @property
    def classes(self) -> tuple[str, ...]:
        seen: list[str] = []
        for cls, _, _ in self.rows:
            if cls not in seen:
                seen.append(cls)
        return tuple(seen)

    def class_rank(self, cls: str) -> int:
        try:
            return self.classes.index(cls)
        except ValueError:
            return len(self.classes)


def _data_text(name: str) -> str:
    return resources.files("geomapqa").joinpath("data", name).read_text(encoding="utf-8")


def load_lithology_table(language: str = "English", path: Optional[str] = None) -> LithologyTable:
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
    else:
        fname = "lithology_en.json" if language == "English" else "lithology_zh.json"
        raw = _data_text(fname)
    data = json.loads(raw)
    rows = tuple((str(r[0]), str(r[1]), str(r[2])) for r in data["rows"])
    seen = set()
    for row in rows:
        if row in seen:
            raise ValueError(f"duplicate lithology row: {row}")
        seen.add(row)
    return LithologyTable(language=data.get("language", language), rows=rows)


def load_stratigraphic_ages() -> list[dict[str, Optional[str]]]:
    return json.loads(_data_text("stratigraphic_ages.json"))["rows"]


def lookup_lithology(name: str, table: LithologyTable) -> Optional[tuple[str, str]]:
    """Resolve a lithology text to (class, subclass): case-insensitive exact
    match first, then the longest table lithology contained in the name."""
    needle = name.casefold().strip()
    for cls, sub, lith in table.rows:
        if lith.casefold() == needle:
            return cls, sub
    best: Optional[tuple[str, str]] = None
    best_len = 0
    for cls, sub, lith in table.rows:
        lf = lith.casefold()
        if lf and lf in needle and len(lf) > best_len:
            best, best_len = (cls, sub), len(lf)
    return best


# ---------------------------------------------------------------------------
# geo queries


def query_quakes(records: Sequence[QuakeRecord], rng: LonLatRange) -> list[QuakeRecord]:
    """Records inside the range with magnitude > 2.5 and year >= 1970, sorted
    by descending magnitude."""
    hits = [
        r
        for r in records
        if r.magnitude > QUAKE_MIN_MAGNITUDE
        and r.year >= QUAKE_MIN_YEAR
        and rng.contains_point(r.lon, r.lat)
    ]
    return sorted(hits, key=lambda r: (-r.magnitude, r.year, r.lon, r.lat))


def _segments_intersect(p1, p2, q1, q2) -> bool:
    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return (v > 0) - (v < 0)

    def on_segment(a, b, c):
        return min(a[0], b[0]) <= c[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= c[1] <= max(
            a[1], b[1]
        )

    o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
    o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_segment(p1, p2, q1):
        return True
    if o2 == 0 and on_segment(p1, p2, q2):
        return True
    if o3 == 0 and on_segment(q1, q2, p1):
        return True
    if o4 == 0 and on_segment(q1, q2, p2):
        return True
    return False


def _segment_hits_rect(p1, p2, rng: LonLatRange) -> bool:
    if rng.contains_point(*p1) or rng.contains_point(*p2):
        return True
    corners = [
        (rng.west, rng.south),
        (rng.east, rng.south),
        (rng.east, rng.north),
        (rng.west, rng.north),
    ]
    edges = list(zip(corners, corners[1:] + corners[:1]))
    return any(_segments_intersect(p1, p2, a, b) for a, b in edges)


def query_faults(faults: Sequence[FaultRecord], rng: LonLatRange) -> list[FaultRecord]:
    """Faults with at least one polyline segment intersecting the rectangle."""
    out = []
    for fault in faults:
        pts = fault.polyline
        if any(_segment_hits_rect(pts[i], pts[i + 1], rng) for i in range(len(pts) - 1)):
            out.append(fault)
    return out


def raster_stats(raster: Raster, rng: LonLatRange, mode: str) -> dict[str, Any]:
    """Zonal statistics over cells whose centers fall inside the range:
    ``sum`` totals the values, ``histogram`` counts cells per class value.
    No overlap yields an empty payload with a warning."""
    if mode not in ("sum", "histogram"):
        raise ValueError(f"unknown raster mode {mode!r}")
    cell = raster.cell_size_deg
    cols = np.arange(raster.width)
    rows = np.arange(raster.height)
    center_lon = raster.west + (cols + 0.5) * cell
    center_lat = raster.north - (rows + 0.5) * cell
    col_mask = (center_lon >= rng.west) & (center_lon <= rng.east)
    row_mask = (center_lat >= rng.south) & (center_lat <= rng.north)
    if not col_mask.any() or not row_mask.any():
        logger.warning("raster query range does not overlap the snapshot extent")
        return {}
    block = raster.grid[np.ix_(row_mask, col_mask)]
    if mode == "sum":
        return {"mode": "sum", "total": float(block.sum()), "cells": int(block.size)}
    values, counts = np.unique(block.astype(np.int64), return_counts=True)
    return {
        "mode": "histogram",
        "counts": {str(int(v)): int(c) for v, c in zip(values, counts)},
        "cells": int(block.size),
    }


# ---------------------------------------------------------------------------
# expert group


@dataclass(frozen=True)
class Expert:
    name: str
    kinds: tuple[str, ...]
    geo_keyed: frozenset[str] = frozenset()


# handler(sources, meta) -> (payload, provenance)
KindHandler = Callable[["KnowledgeSources", Optional[MapMetadata]], tuple[dict, dict]]


@dataclass(frozen=True)
class KnowledgeEntry:
    expert: str
    kind: str
    payload: Mapping[str, Any]
    provenance: Mapping[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "expert": self.expert,
            "kind": self.kind,
            "payload": dict(self.payload),
            "provenance": dict(self.provenance),
        }


@dataclass
class KnowledgePacket:
    entries: list[KnowledgeEntry] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"entries": [e.to_dict() for e in self.entries]}

    def render(self) -> dict[str, Any]:
        """Compact kind->payload view for prompt injection."""
        return {e.kind: dict(e.payload) for e in self.entries}


class ExpertGroup:
    """Registry of experts and their kind handlers; gate/consult dispatch is
    registry-driven so adding an expert needs no call-site changes."""

    def __init__(self) -> None:
        self.experts: list[Expert] = []
        self._handlers: dict[str, KindHandler] = {}

    def register(self, expert: Expert, handlers: Mapping[str, KindHandler]) -> None:
        offered = {k for e in self.experts for k in e.kinds}
        dup = offered & set(expert.kinds)
        if dup:
            raise ValueError(f"knowledge kinds already registered: {sorted(dup)}")
        missing = set(expert.kinds) - set(handlers)
        if missing:
            raise ValueError(f"expert {expert.name} lacks handlers for {sorted(missing)}")
        self.experts.append(expert)
        self._handlers.update({k: handlers[k] for k in expert.kinds})

    def expert_for(self, kind: str) -> Optional[Expert]:
        for expert in self.experts:
            if kind in expert.kinds:
                return expert
        return None

    def handler(self, kind: str) -> KindHandler:
        return self._handlers[kind]


@dataclass
class KnowledgeSources:
    """Lazily loaded snapshot bundle. Missing files surface as ToolError only
    when the corresponding kind is actually consulted."""

    snapshot_dir: Optional[str] = None
    language: str = "English"
    _cache: dict[str, Any] = field(default_factory=dict, repr=False)

    def _path(self, name: str) -> str:
        if self.snapshot_dir is None:
            raise ToolError(f"no snapshot directory configured (needed for {name})")
        return str(Path(self.snapshot_dir) / name)

    @property
    def lithology(self) -> LithologyTable:
        if "lithology" not in self._cache:
            self._cache["lithology"] = load_lithology_table(self.language)
        return self._cache["lithology"]

    @property
    def ages(self) -> list[dict[str, Optional[str]]]:
        if "ages" not in self._cache:
            self._cache["ages"] = load_stratigraphic_ages()
        return self._cache["ages"]

    @property
    def component_schema(self) -> dict[str, list[str]]:
        if "schema" not in self._cache:
            from .hie import load_extraction_schema

            self._cache["schema"] = load_extraction_schema()
        return self._cache["schema"]

    @property
    def quakes(self) -> list[QuakeRecord]:
        if "quakes" not in self._cache:
            self._cache["quakes"] = load_quakes(self._path("quakes.csv"))
        return self._cache["quakes"]

    @property
    def faults(self) -> list[FaultRecord]:
        if "faults" not in self._cache:
            self._cache["faults"] = load_faults(self._path("faults.json"))
        return self._cache["faults"]

    @property
    def population(self) -> Raster:
        if "population" not in self._cache:
            self._cache["population"] = load_raster(self._path("population.bin"))
        return self._cache["population"]

    @property
    def landcover(self) -> Raster:
        if "landcover" not in self._cache:
            self._cache["landcover"] = load_raster(self._path("landcover.bin"))
        return self._cache["landcover"]


def _require_lonlat(meta: Optional[MapMetadata]) -> LonLatRange:
    if meta is None or meta.lonlat is None:
        raise ToolError("geo-keyed knowledge needs the map's lon-lat range")
    return meta.lonlat


def _h_lithology(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    table = sources.lithology
    payload = {"language": table.language, "rows": [list(r) for r in table.rows]}
    return payload, {"source": f"lithology table ({table.language})", "query": "static"}


def _h_ages(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    return {"rows": sources.ages}, {"source": "stratigraphic age table", "query": "static"}


def _h_schema(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    return dict(sources.component_schema), {"source": "component schema", "query": "static"}


def _h_quakes(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    rng = _require_lonlat(meta)
    hits = query_quakes(sources.quakes, rng)
    payload = {
        "count": len(hits),
        "max_magnitude": hits[0].magnitude if hits else None,
        "records": [r.to_dict() for r in hits[:20]],
    }
    return payload, {"source": sources._path("quakes.csv"), "query": rng.to_dict()}


def _h_faults(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    rng = _require_lonlat(meta)
    hits = query_faults(sources.faults, rng)
    payload = {"count": len(hits), "faults": [f.to_dict() for f in hits[:20]]}
    return payload, {"source": sources._path("faults.json"), "query": rng.to_dict()}


def _h_population(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    rng = _require_lonlat(meta)
    payload = raster_stats(sources.population, rng, "sum")
    return payload, {"source": sources._path("population.bin"), "query": rng.to_dict()}


def _h_landcover(sources: KnowledgeSources, meta) -> tuple[dict, dict]:
    rng = _require_lonlat(meta)
    payload = raster_stats(sources.landcover, rng, "histogram")
    return payload, {"source": sources._path("landcover.bin"), "query": rng.to_dict()}


def default_expert_group() -> ExpertGroup:
    group = ExpertGroup()
    group.register(
        Expert("geologist", ("lithology_table", "stratigraphic_age", "component_schema")),
        {
            "lithology_table": _h_lithology,
            "stratigraphic_age": _h_ages,
            "component_schema": _h_schema,
        },
    )
    group.register(
        Expert(
            "geographer",
            ("population_density", "land_cover"),
            frozenset({"population_density", "land_cover"}),
        ),
        {"population_density": _h_population, "land_cover": _h_landcover},
    )
    group.register(
        Expert(
            "seismologist",
            ("historical_earthquakes", "active_faults"),
            frozenset({"historical_earthquakes", "active_faults"}),
        ),
        {"historical_earthquakes": _h_quakes, "active_faults": _h_faults},
    )
    return group


# ---------------------------------------------------------------------------
# gate and consult


GATE_PROMPT_TEMPLATE = (
    "You are deciding what domain knowledge is needed to answer a question "
    "about a geologic map.\n"
    "Question: {question}\n"
    "The {expert} offers these knowledge kinds: {kinds}.\n"
    "For each kind, answer yes or no: is that knowledge needed to answer the question?\n"
    "Respond in JSON format only, for example: {example}"
)


def gate(
    item: BenchItem,
    group: ExpertGroup,
    backend: Backend,
    *,
    map_image: Optional[np.ndarray] = None,
    map_id: Optional[str] = None,
) -> set[str]:
    """One backend call per expert asking yes/no per offered kind; returns the
    union of affirmed kinds. Backend failure degrades to an empty gate set."""
    needed: set[str] = set()
    images: tuple[ImageAttachment, ...] = ()
    if map_image is not None:
        from .core import downscale_max_edge

        scaled, _ = downscale_max_edge(map_image, 1024)
        images = (ImageAttachment.from_array(f"{map_id or item.map_id}:full", scaled),)
    for expert in group.experts:
        example = json.dumps({k: "yes" for k in expert.kinds[:1]} | {k: "no" for k in expert.kinds[1:]})
        instruction = GATE_PROMPT_TEMPLATE.format(
            question=item.question_text,
            expert=expert.name,
            kinds=", ".join(expert.kinds),
            example=example,
        )
        req = CompletionRequest(
            system=BASE_SYSTEM_PROMPT, instruction=instruction, images=images, json_mode=True
        )
        try:
            raw = backend.complete(req)
        except BackendError as exc:
            logger.warning("gate call for %s failed (%s); assuming no knowledge", expert.name, exc)
            continue
        doc = _loads_lenient(raw)
        if not isinstance(doc, dict):
            logger.warning("gate reply for %s unparseable; assuming no knowledge", expert.name)
            continue
        for kind in expert.kinds:
            value = doc.get(kind)
            if isinstance(value, bool) and value:
                needed.add(kind)
            elif isinstance(value, str) and value.strip().casefold().startswith("y"):
                needed.add(kind)
    return needed


def _loads_lenient(raw: str) -> Any:
    try:
        return json.loads(raw)
    except (json.JSONDecodeError, TypeError):
        pass
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        try:
            return json.loads(raw[start : end + 1])
        except json.JSONDecodeError:
            return None
    return None


def consult(
    group: ExpertGroup,
    kinds: Iterable[str],
    meta: Optional[MapMetadata],
    sources: KnowledgeSources,
) -> KnowledgePacket:
    """Consult the experts offering the requested kinds, in registry order.
    Geo-keyed kinds without a lon-lat range are skipped with a warning."""
    wanted = set(kinds)
    packet = KnowledgePacket()
    for expert in group.experts:
        for kind in expert.kinds:
            if kind not in wanted:
                continue
            if kind in expert.geo_keyed and (meta is None or meta.lonlat is None):
                logger.warning("skipping geo-keyed kind %s: no lon-lat range available", kind)
                continue
            payload, provenance = group.handler(kind)(sources, meta)
            packet.entries.append(KnowledgeEntry(expert.name, kind, payload, provenance))
    return packet
