"""Benchmark generation: instantiate the 25 task kinds against map metadata,
computing every ground truth by retrieving, calculating, or aggregating over
the annotations.

Tasks whose required metadata is absent are skipped (and logged), so a map
without a cross section simply contributes no cross-section grounding items.
Generation is deterministic for a fixed seed and metadata.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

from .core import (
    ALL_TASKS,
    AnswerValue,
    BenchItem,
    Choice,
    GROUNDING_BY_INTENTION_TASKS,
    GROUNDING_BY_NAME_TASKS,
    LonLatRange,
    MCQ_LABELS,
    MapMetadata,
    TASK_ABILITY,
    TASK_QTYPE,
    grounding_component,
    validate_metadata,
)
from .dki import (
    KnowledgeSources,
    LithologyTable,
    load_lithology_table,
    lookup_lithology,
    query_faults,
    query_quakes,
    raster_stats,
)
from .fixtures import (  # noqa: F401  (re-exported fixture surface)
    FixtureSpec,
    make_fixture_spec,
    render_fixture,
    synth_fixture,
    write_fixture_corpus,
)

logger = logging.getLogger(__name__)

COMPASS_CELLS = {
    "Northwest": (0, 0),
    "North": (0, 1),
    "Northeast": (0, 2),
    "West": (1, 0),
    "Center": (1, 1),
    "East": (1, 2),
    "Southwest": (2, 0),
    "South": (2, 1),
    "Southeast": (2, 2),
}

RANK_WORDS = {1: "first", 2: "second", 3: "third", 4: "fourth"}

# separation (euclidean RGB) required between legend colors before a
# closest-color question is considered unambiguous
MIN_COLOR_SEPARATION = 32.0

FAULT_MCQ_FILLERS = (
    "Cannot be determined from the map",
    "The question does not apply to this map",
)

_MAX_RESAMPLES = 25


class SkipTask(Exception):
    """A task is inapplicable to this map; generation skips it."""


@dataclass(frozen=True)
class TaskTemplate:
    task: str
    ability: str
    qtype: str
    phrasings: tuple[str, ...]
    intentions: tuple[str, ...] = ()


@dataclass(frozen=True)
class TemplateSet:
    templates: Mapping[str, TaskTemplate]
    answer_hints: Mapping[str, str]

    def __post_init__(self) -> None:
        missing = set(ALL_TASKS) - set(self.templates)
        extra = set(self.templates) - set(ALL_TASKS)
        if missing or extra:
            raise ValueError(f"template set must cover the 25 tasks exactly; "
                             f"missing={sorted(missing)} extra={sorted(extra)}")
        for template in self.templates.values():
            if not template.phrasings:
                raise ValueError(f"empty phrasing pool for task {template.task}")
            if template.task in GROUNDING_BY_INTENTION_TASKS and not template.intentions:
                raise ValueError(f"empty intention pool for task {template.task}")


def load_templates(path: Optional[str] = None) -> TemplateSet:
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
    else:
        raw = resources.files("geomapqa").joinpath("data", "task_templates.json").read_text(
            encoding="utf-8"
        )
    data = json.loads(raw)
    templates = {}
    for task, entry in data["tasks"].items():
        templates[task] = TaskTemplate(
            task=task,
            ability=TASK_ABILITY[task],
            qtype=TASK_QTYPE[task],
            phrasings=tuple(entry["phrasings"]),
            intentions=tuple(entry.get("intentions", ())),
        )
    return TemplateSet(templates=templates, answer_hints=dict(data.get("answer_hints", {})))


@dataclass(frozen=True)
class GenConfig:
    seed: int = 42
    per_task: int = 1
    distractor_count: int = 3  # MCQ has 4 choices

    def __post_init__(self) -> None:
        if self.distractor_count != 3:
            raise ValueError("multiple-choice items carry exactly 3 distractors")
        if self.per_task < 1:
            raise ValueError("per_task must be >= 1")


# ---------------------------------------------------------------------------
# ground-truth calculators


def gt_area_rank(rock_areas: Mapping[str, float], k: int, choices: Sequence[str]) -> str:
    """Name of the rock whose area fraction has descending rank k among the
    4 given choices. Ties are a generation-time error (resample distractors)."""
    if len(choices) != 4:
        raise ValueError("area ranking is defined over exactly 4 choices")
    if not 1 <= k <= 4:
        raise ValueError(f"rank k must be in 1..4, got {k}")
    areas = [rock_areas[name] for name in choices]
    if len(set(areas)) != len(areas):
        raise SkipTask("tied areas among choices; resample distractors")
    ranked = sorted(choices, key=lambda n: -rock_areas[n])
    return ranked[k - 1]


def gt_fault_in_cell(fault_grid: Sequence[Sequence[bool]], direction: str) -> str:
    """Yes/No for the compass-named cell of the 3x3 fault grid (row 0 north,
    column 0 west)."""
    if direction not in COMPASS_CELLS:
        raise ValueError(f"unknown direction {direction!r}")
    row, col = COMPASS_CELLS[direction]
    return "Yes" if fault_grid[row][col] else "No"


def gt_lithology_majority(
    rock_areas: Mapping[str, float],
    legend_units: Sequence,
    table: LithologyTable,
) -> Optional[str]:
    """Level-1 lithology class with the largest summed area fraction.
    Unresolvable rocks pool into "unknown" and are excluded from the argmax;
    ties break by table order. None when nothing resolves."""
    lith_by_rock = {u.rock_name: u.lithology for u in legend_units if u.rock_name}
    sums: dict[str, float] = {}
    for rock, frac in rock_areas.items():
        lith = lith_by_rock.get(rock) or rock
        hit = lookup_lithology(lith, table)
        cls = hit[0] if hit else "unknown"
        sums[cls] = sums.get(cls, 0.0) + frac
    sums.pop("unknown", None)
    if not sums:
        return None
    return min(sums, key=lambda c: (-sums[c], table.class_rank(c)))


def _hex(color: Sequence[int]) -> str:
    return "#%02X%02X%02X" % tuple(color)


def _color_distance_sq(a: Sequence[int], b: Sequence[int]) -> int:
    return sum((int(x) - int(y)) ** 2 for x, y in zip(a, b))


def gt_color_referring(
    legend_units: Sequence,
    direction: str,
    query,
    rng: Optional[random.Random] = None,
) -> tuple[str, list[str]]:
    """Referring ground truth.

    direction="color_to_rock": query is an RGB triple; the answer is the rock
    of the legend unit minimizing euclidean RGB distance (ties to the lower
    legend index). direction="rock_to_color": query is a rock name; the
    answer is that unit's hex color. Distractors come from other units."""
    units = [u for u in legend_units if u.rock_name]
    if len(units) < 4:
        raise SkipTask("fewer than 4 named legend units")
    if direction == "color_to_rock":
        sep_sq = MIN_COLOR_SEPARATION**2
        for i, a in enumerate(units):
            for b in units[i + 1 :]:
                if _color_distance_sq(a.color, b.color) < sep_sq:
                    raise SkipTask("legend colors not separable enough for a closest-color item")
        best = min(enumerate(units), key=lambda iu: (_color_distance_sq(iu[1].color, query), iu[0]))
        answer = best[1].rock_name
        others = [u.rock_name for u in units if u.rock_name != answer]
    elif direction == "rock_to_color":
        unit = next((u for u in units if u.rock_name == query), None)
        if unit is None:
            raise ValueError(f"rock {query!r} not in the legend")
        answer = _hex(unit.color)
        others = [_hex(u.color) for u in units if u is not unit]
    else:
        raise ValueError(f"unknown referring direction {direction!r}")
    others = sorted(set(others) - {answer})
    if len(others) < 3:
        raise SkipTask("not enough distinct distractors")
    distractors = (rng.sample(others, 3) if rng else others[:3])
    return answer, distractors


def gt_lonlat_localization(point: tuple[float, float], candidates: Sequence[MapMetadata]) -> str:
    """Sheet name of the single candidate whose lon-lat range contains the
    point; zero or multiple containers demand a resample."""
    lon, lat = point
    containing = [m for m in candidates if m.lonlat is not None and m.lonlat.contains_point(lon, lat)]
    if len(containing) != 1:
        raise SkipTask(f"{len(containing)} candidates contain the point; resample")
    name = containing[0].sheet_name
    if not name:
        raise SkipTask("containing candidate has no sheet name")
    return name


# ---------------------------------------------------------------------------
# reference essay


def synthesize_risk_essay(meta: MapMetadata, sources: Optional[KnowledgeSources] = None) -> str:
    """Deterministic reference essay on seismic risk, grounded in the map's
    fault grid and, when snapshots are available, the tool-pool queries."""
    fault_cells = sum(1 for row in (meta.fault_grid or ()) for v in row if v)
    quake_count = 0
    max_mag: Optional[float] = None
    fault_count = 0
    population: Optional[float] = None
    cover_desc = None
    if sources is not None and meta.lonlat is not None:
        hits = query_quakes(sources.quakes, meta.lonlat)
        quake_count = len(hits)
        max_mag = hits[0].magnitude if hits else None
        fault_count = len(query_faults(sources.faults, meta.lonlat))
        pop_stats = raster_stats(sources.population, meta.lonlat, "sum")
        population = pop_stats.get("total")
        cover = raster_stats(sources.landcover, meta.lonlat, "histogram").get("counts", {})
        if cover:
            top = max(cover, key=lambda k: cover[k])
            cover_desc = f"land-cover class {top}"

    score = 0
    score += 2 if quake_count >= 10 else (1 if quake_count >= 1 else 0)
    score += 1 if (max_mag or 0) >= 5.0 else 0
    score += 1 if fault_count >= 1 else 0
    score += 1 if fault_cells >= 4 else 0
    level = ("low", "moderate", "elevated", "high", "high")[min(score, 4)]

    region = meta.sheet_name or "the mapped area"
    parts = [f"Seismic risk assessment for {region}."]
    possibility = [
        f"Possibility: mapped faults appear in {fault_cells} of the 9 grid sectors of the main map"
    ]
    if quake_count:
        possibility.append(
            f"the catalog records {quake_count} earthquakes above magnitude 2.5 since 1970 "
            f"within the map extent, the strongest reaching magnitude {max_mag}"
        )
    else:
        possibility.append("no qualifying earthquakes are recorded within the map extent since 1970")
    if fault_count:
        possibility.append(f"{fault_count} active fault traces intersect the area")
    parts.append(", and ".join(possibility) + ".")
    impact = ["Societal impact:"]
    if population is not None:
        impact.append(f"an estimated population of {population:.0f} lies within the extent,")
    if cover_desc:
        impact.append(f"dominated by {cover_desc};")
    impact.append(
        "ground shaking would chiefly endanger settlements and lifeline infrastructure "
        "along the mapped fault sectors, and secondary hazards such as landslides and "
        "liquefaction should be considered where unconsolidated deposits occur."
    )
    parts.append(" ".join(impact))
    parts.append(
        f"Overall, combining the recorded seismicity, the fault coverage of the map, and the "
        f"exposure of the region, the seismic risk is judged {level}."
    )
    return " ".join(parts)


# ---------------------------------------------------------------------------
# generation


@dataclass
class _GenContext:
    map_id: str
    meta: MapMetadata
    templates: TemplateSet
    rng: random.Random
    corpus: Sequence[MapMetadata]
    sources: Optional[KnowledgeSources]
    table: LithologyTable
    essay: Optional[str] = None


def _phrase(ctx: _GenContext, task: str, **fmt: Any) -> str:
    template = ctx.templates.templates[task]
    text = ctx.rng.choice(template.phrasings).format(**fmt)
    if task in GROUNDING_BY_NAME_TASKS + GROUNDING_BY_INTENTION_TASKS:
        hint = ctx.templates.answer_hints.get("bbox")
    else:
        hint = ctx.templates.answer_hints.get(task)
    return f"{text} {hint}" if hint else text


def _mcq_item(
    ctx: _GenContext, task: str, index: int, question: str, answer_text: str, distractors: Sequence[str]
) -> BenchItem:
    texts = [answer_text, *distractors]
    if len(set(texts)) != 4:
        raise SkipTask("duplicate choice texts")
    ctx.rng.shuffle(texts)
    choices = tuple(Choice(label, text) for label, text in zip(MCQ_LABELS, texts))
    gt_label = choices[texts.index(answer_text)].label
    return BenchItem(
        id=f"{ctx.map_id}:{task}:{index:03d}",
        map_id=ctx.map_id,
        ability=TASK_ABILITY[task],
        task=task,
        qtype="MCQ",
        question_text=question,
        choices=choices,
        ground_truth=AnswerValue.choice(gt_label),
    )


def _fitb_item(ctx: _GenContext, task: str, index: int, question: str, gt: AnswerValue) -> BenchItem:
    return BenchItem(
        id=f"{ctx.map_id}:{task}:{index:03d}",
        map_id=ctx.map_id,
        ability=TASK_ABILITY[task],
        task=task,
        qtype="FITB",
        question_text=question,
        choices=None,
        ground_truth=gt,
    )


def _build_sheet_name(ctx: _GenContext, i: int) -> BenchItem:
    if not ctx.meta.sheet_name:
        raise SkipTask("no sheet name")
    return _fitb_item(ctx, "sheet_name", i, _phrase(ctx, "sheet_name"),
                      AnswerValue.text(ctx.meta.sheet_name))


def _build_scale(ctx: _GenContext, i: int) -> BenchItem:
    if not ctx.meta.scale:
        raise SkipTask("no scale")
    return _fitb_item(ctx, "scale", i, _phrase(ctx, "scale"), AnswerValue.text(ctx.meta.scale))


def _build_lonlat(ctx: _GenContext, i: int) -> BenchItem:
    if ctx.meta.lonlat is None:
        raise SkipTask("no lon-lat range")
    return _fitb_item(ctx, "lonlat", i, _phrase(ctx, "lonlat"), AnswerValue.lonlat(ctx.meta.lonlat))


def _build_index_map(ctx: _GenContext, i: int) -> BenchItem:
    if not ctx.meta.neighbors:
        raise SkipTask("no neighbors")
    return _fitb_item(ctx, "index_map", i, _phrase(ctx, "index_map"),
                      AnswerValue.names(ctx.meta.neighbors))


def _build_grounding(ctx: _GenContext, task: str, i: int) -> BenchItem:
    kind = grounding_component(task)
    component = ctx.meta.component(kind)
    if component is None:
        raise SkipTask(f"no {kind} component")
    if task.endswith("_by_intention"):
        intention = ctx.rng.choice(ctx.templates.templates[task].intentions)
        question = _phrase(ctx, task, intention=intention)
    else:
        question = _phrase(ctx, task, component=kind.replace("_", " "))
    return _fitb_item(ctx, task, i, question, AnswerValue.bbox(component.bbox))


def _build_color_by_rock(ctx: _GenContext, i: int) -> BenchItem:
    units = [u for u in ctx.meta.legend_units if u.rock_name]
    if len(units) < 4:
        raise SkipTask("fewer than 4 named legend units")
    target = ctx.rng.choice(units)
    answer, distractors = gt_color_referring(
        ctx.meta.legend_units, "rock_to_color", target.rock_name, ctx.rng
    )
    question = _phrase(ctx, "color_by_rock", rock=target.rock_name)
    return _mcq_item(ctx, "color_by_rock", i, question, answer, distractors)


def _build_rock_by_color(ctx: _GenContext, i: int) -> BenchItem:
    units = [u for u in ctx.meta.legend_units if u.rock_name]
    if len(units) < 4:
        raise SkipTask("fewer than 4 named legend units")
    target = ctx.rng.choice(units)
    answer, distractors = gt_color_referring(
        ctx.meta.legend_units, "color_to_rock", target.color, ctx.rng
    )
    question = _phrase(ctx, "rock_by_color", hex=_hex(target.color))
    return _mcq_item(ctx, "rock_by_color", i, question, answer, distractors)


def _build_area_comparison(ctx: _GenContext, i: int) -> BenchItem:
    rocks = sorted(ctx.meta.rock_areas)
    if len(rocks) < 4:
        raise SkipTask("fewer than 4 rocks with recorded areas")
    for _ in range(_MAX_RESAMPLES):
        chosen = ctx.rng.sample(rocks, 4)
        k = ctx.rng.randint(1, 4)
        try:
            answer = gt_area_rank(ctx.meta.rock_areas, k, chosen)
        except SkipTask:
            logger.info("%s: tied areas, resampling distractors", ctx.map_id)
            continue
        question = _phrase(ctx, "area_comparison", rank=RANK_WORDS[k])
        distractors = [r for r in chosen if r != answer]
        return _mcq_item(ctx, "area_comparison", i, question, answer, distractors)
    raise SkipTask("could not draw 4 rocks with distinct areas")


def _build_fault_existence(ctx: _GenContext, i: int) -> BenchItem:
    if ctx.meta.fault_grid is None:
        raise SkipTask("no fault grid")
    direction = ctx.rng.choice(sorted(COMPASS_CELLS))
    answer = gt_fault_in_cell(ctx.meta.fault_grid, direction)
    question = _phrase(ctx, "fault_existence", direction=direction)
    distractors = ["No" if answer == "Yes" else "Yes", *FAULT_MCQ_FILLERS]
    return _mcq_item(ctx, "fault_existence", i, question, answer, distractors)


def _build_lithology_composition(ctx: _GenContext, i: int) -> BenchItem:
    if not ctx.meta.rock_areas:
        raise SkipTask("no rock areas")
    majority = gt_lithology_majority(ctx.meta.rock_areas, ctx.meta.legend_units, ctx.table)
    if majority is None:
        raise SkipTask("no rock resolves through the lithology table")
    others = [c for c in ctx.table.classes if c != majority]
    if len(others) < 3:
        raise SkipTask("fewer than 4 lithology classes available")
    question = _phrase(ctx, "lithology_composition")
    return _mcq_item(ctx, "lithology_composition", i, question, majority,
                     ctx.rng.sample(others, 3))


def _build_lonlat_localization(ctx: _GenContext, i: int) -> BenchItem:
    rng_box = ctx.meta.lonlat
    if rng_box is None or not ctx.meta.sheet_name:
        raise SkipTask("needs lon-lat range and sheet name")
    for _ in range(_MAX_RESAMPLES):
        lon = round(ctx.rng.uniform(rng_box.west + 0.1 * rng_box.width,
                                    rng_box.east - 0.1 * rng_box.width), 2)
        lat = round(ctx.rng.uniform(rng_box.south + 0.1 * rng_box.height,
                                    rng_box.north - 0.1 * rng_box.height), 2)
        if not (rng_box.west < lon < rng_box.east and rng_box.south < lat < rng_box.north):
            continue
        candidates = _localization_candidates(ctx, (lon, lat))
        if candidates is None:
            continue
        try:
            answer = gt_lonlat_localization((lon, lat), candidates)
        except SkipTask:
            continue
        names = [m.sheet_name for m in candidates]
        question = _phrase(ctx, "lonlat_localization", lon=lon, lat=lat)
        return _mcq_item(ctx, "lonlat_localization", i, question, answer,
                         [n for n in names if n != answer])
    raise SkipTask("could not place an unambiguous localization point")


def _localization_candidates(
    ctx: _GenContext, point: tuple[float, float]
) -> Optional[list[MapMetadata]]:
    lon, lat = point
    others = [
        m
        for m in ctx.corpus
        if m is not ctx.meta
        and m.sheet_name
        and m.sheet_name != ctx.meta.sheet_name
        and m.lonlat is not None
        and not m.lonlat.contains_point(lon, lat)
    ]
    ctx.rng.shuffle(others)
    chosen = others[:3]
    # top up with synthetic adjacent sheets named after the index-map neighbors
    rng_box = ctx.meta.lonlat
    pool = list(ctx.meta.neighbors) or [f"Sheet {n}" for n in ("II", "III", "IV")]
    n_extra = 0
    while len(chosen) < 3 and n_extra < len(pool):
        shift = (n_extra + 1) * 2.0 * rng_box.width
        fake_box = LonLatRange(
            rng_box.west + shift, rng_box.east + shift, rng_box.south, rng_box.north
        )
        name = pool[n_extra] + (" Quadrangle" if ctx.meta.language == "English" else "幅")
        n_extra += 1
        if name == ctx.meta.sheet_name or any(c.sheet_name == name for c in chosen):
            continue
        if fake_box.east > 180.0 or not fake_box.is_valid():
            continue
        chosen.append(MapMetadata(sheet_name=name, lonlat=fake_box))
    if len(chosen) < 3:
        return None
    names = {ctx.meta.sheet_name, *(c.sheet_name for c in chosen)}
    if len(names) != 4:
        return None
    return [ctx.meta, *chosen]


def _build_earthquake_risk(ctx: _GenContext, i: int) -> BenchItem:
    if ctx.essay is None:
        ctx.essay = synthesize_risk_essay(ctx.meta, ctx.sources)
    question = _phrase(ctx, "earthquake_risk")
    return BenchItem(
        id=f"{ctx.map_id}:earthquake_risk:{i:03d}",
        map_id=ctx.map_id,
        ability="analyzing",
        task="earthquake_risk",
        qtype="EQ",
        question_text=question,
        choices=None,
        ground_truth=AnswerValue.essay(ctx.essay),
    )


def _builder(task: str):
    if task in GROUNDING_BY_NAME_TASKS + GROUNDING_BY_INTENTION_TASKS:
        return lambda ctx, i: _build_grounding(ctx, task, i)
    return {
        "sheet_name": _build_sheet_name,
        "scale": _build_scale,
        "lonlat": _build_lonlat,
        "index_map": _build_index_map,
        "color_by_rock": _build_color_by_rock,
        "rock_by_color": _build_rock_by_color,
        "area_comparison": _build_area_comparison,
        "fault_existence": _build_fault_existence,
        "lithology_composition": _build_lithology_composition,
        "lonlat_localization": _build_lonlat_localization,
        "earthquake_risk": _build_earthquake_risk,
    }[task]


def generate(
    meta: MapMetadata,
    templates: TemplateSet,
    config: GenConfig,
    *,
    map_id: str,
    corpus: Sequence[MapMetadata] = (),
    sources: Optional[KnowledgeSources] = None,
) -> list[BenchItem]:
    """Generate ``config.per_task`` items per applicable task for one map.

    The metadata must already be valid; inapplicable tasks are skipped and
    logged, never errors."""
    bad = validate_metadata(meta, (10**9, 10**9))
    if bad:
        raise ValueError(f"metadata for {map_id} is invalid: {bad[0]}")
    rng = random.Random(f"benchgen:{config.seed}:{map_id}")
    table = load_lithology_table(meta.language or "English")
    ctx = _GenContext(
        map_id=map_id,
        meta=meta,
        templates=templates,
        rng=rng,
        corpus=corpus,
        sources=sources,
        table=table,
    )
    items: list[BenchItem] = []
    for task in ALL_TASKS:
        build = _builder(task)
        for i in range(config.per_task):
            try:
                item = build(ctx, i)
            except SkipTask as skip:
                logger.info("%s: skipping task %s (%s)", map_id, task, skip)
                break
            bad_item = item.violations()
            if bad_item:
                raise AssertionError(f"generated item violates invariants: {bad_item}")
            items.append(item)
    return items
