"""Synthetic map fixtures: deterministic rendering of desk-scale geologic-map
images together with exactly matching metadata, detector annotation files, and
tool-pool snapshots.

Rendering guarantees the properties the pipeline tests rely on: legend
swatches are flat fills of the metadata color (their interior median is exact)
and rock regions are vertical strips whose pixel fractions track the metadata
area fractions to well within 0.01.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .core import (
    BBox,
    Component,
    LegendUnit,
    LonLatRange,
    MapMetadata,
    NAMED_COMPONENT_KINDS,
    save_image,
)
from .dki import load_lithology_table

logger = logging.getLogger(__name__)

# every fixture map sits inside this window so one snapshot bundle covers all
CORPUS_WINDOW = LonLatRange(-106.0, -100.0, 34.0, 40.0)

_LAYOUT = {
    "title": (0.25, 0.02, 0.75, 0.08),
    "main_map": (0.04, 0.10, 0.62, 0.72),
    "legend": (0.66, 0.10, 0.96, 0.62),
    "scale": (0.28, 0.74, 0.56, 0.78),
    "index_map": (0.66, 0.66, 0.92, 0.80),
    "cross_section": (0.04, 0.80, 0.60, 0.94),
    "stratigraphic_column": (0.68, 0.84, 0.90, 0.98),
}

_BG_COLOR = (245, 243, 238)
_INK = (40, 40, 40)

_EN_PLACES = (
    "Alder Creek", "Bear Hollow", "Cedar Gap", "Drake Pass", "Eagle Bluff",
    "Falcon Ridge", "Granite Falls", "Hawk Valley", "Iron Mountain",
    "Juniper Flats", "Kestrel Butte", "Larkspur Basin", "Maple Summit",
    "Nolan Spring", "Otter Bend", "Pine Notch", "Quartz Hill", "Raven Mesa",
)
_ZH_PLACES = ("青山", "黑水", "白石", "红崖", "黄岭", "绿洲", "紫金", "银川", "云台", "石门", "龙泉", "松岗")
_EN_SCALES = ("1:24000", "1:62500", "1:100000", "1:125000", "1:250000", "1:500000")
_ZH_SCALES = ("1:50000", "1:200000", "1:250000")
_EN_ROCK_MODIFIERS = ("Upper", "Lower", "Gray", "Red", "Banded", "Massive", "Thin-bedded")
_AGES = (
    "Quaternary", "Neogene", "Paleogene", "Cretaceous", "Jurassic", "Triassic",
    "Permian", "Carboniferous", "Devonian", "Silurian", "Ordovician", "Cambrian",
)


@dataclass(frozen=True)
class LegendSpec:
    rock_name: str
    color: tuple[int, int, int]
    lithology: str
    stratigraphic_age: str


@dataclass(frozen=True)
class FixtureSpec:
    """Complete recipe for one synthetic map: layout components, legend
    palette, rock area fractions, and fault pattern."""

    map_id: str
    size: int
    language: str
    sheet_name: str
    scale: str
    lonlat: LonLatRange
    neighbors: tuple[str, ...]
    components: tuple[str, ...]
    legend: tuple[LegendSpec, ...]
    rock_areas: Mapping[str, float]
    fault_grid: tuple[tuple[bool, ...], ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "map_id": self.map_id,
            "size": self.size,
            "language": self.language,
            "sheet_name": self.sheet_name,
            "scale": self.scale,
            "lonlat": self.lonlat.to_dict(),
            "neighbors": list(self.neighbors),
            "components": list(self.components),
            "legend": [
                {
                    "rock_name": u.rock_name,
                    "color": list(u.color),
                    "lithology": u.lithology,
                    "stratigraphic_age": u.stratigraphic_age,
                }
                for u in self.legend
            ],
            "rock_areas": dict(self.rock_areas),
            "fault_grid": [list(r) for r in self.fault_grid],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "FixtureSpec":
        return cls(
            map_id=d["map_id"],
            size=int(d["size"]),
            language=d["language"],
            sheet_name=d["sheet_name"],
            scale=d["scale"],
            lonlat=LonLatRange.from_dict(d["lonlat"]),
            neighbors=tuple(d["neighbors"]),
            components=tuple(d["components"]),
            legend=tuple(
                LegendSpec(u["rock_name"], tuple(u["color"]), u["lithology"], u["stratigraphic_age"])
                for u in d["legend"]
            ),
            rock_areas=dict(d["rock_areas"]),
            fault_grid=tuple(tuple(bool(v) for v in r) for r in d["fault_grid"]),
        )


def _color_distance(a: Sequence[int], b: Sequence[int]) -> float:
    return float(np.sqrt(sum((x - y) ** 2 for x, y in zip(a, b))))


def _sample_palette(rng: random.Random, n: int) -> list[tuple[int, int, int]]:
    """Pairwise-separated colors, also kept away from the ink, background, and
    fault colors so pixel counting stays unambiguous."""
    reserved = [(0, 0, 0), (255, 255, 255), _BG_COLOR, _INK, (200, 200, 200)]
    palette: list[tuple[int, int, int]] = []
    attempts = 0
    while len(palette) < n:
        attempts += 1
        if attempts > 10_000:
            raise ValueError(f"could not sample {n} separated colors")
        candidate = (rng.randint(30, 230), rng.randint(30, 230), rng.randint(30, 230))
        if all(_color_distance(candidate, c) >= 48 for c in palette) and all(
            _color_distance(candidate, c) >= 60 for c in reserved
        ):
            palette.append(candidate)
    return palette


def _sample_fractions(rng: random.Random, n: int) -> list[float]:
    for _ in range(200):
        weights = [rng.uniform(0.5, 2.0) for _ in range(n)]
        total = sum(weights)
        fracs = [round(w / total, 4) for w in weights]
        fracs[-1] = round(1.0 - sum(fracs[:-1]), 4)
        if min(fracs) < 0.03:
            continue
        if len({round(f, 4) for f in fracs}) == n and all(
            abs(a - b) >= 0.01 for i, a in enumerate(fracs) for b in fracs[i + 1 :]
        ):
            return fracs
    raise ValueError(f"could not sample {n} distinct area fractions")


def make_fixture_spec(
    seed: int,
    *,
    map_id: Optional[str] = None,
    size: int = 1024,
    language: str = "English",
    components: Sequence[str] = NAMED_COMPONENT_KINDS,
    n_legend_units: Optional[int] = None,
) -> FixtureSpec:
    rng = random.Random(f"fixture:{seed}")
    places = _EN_PLACES if language == "English" else _ZH_PLACES
    names = rng.sample(places, min(len(places), 9))
    sheet_base, neighbor_names = names[0], names[1:]
    sheet_name = f"{sheet_base} Quadrangle" if language == "English" else f"{sheet_base}幅"
    neighbors = tuple(sorted(rng.sample(neighbor_names, rng.randint(4, 8))))
    scale = rng.choice(_EN_SCALES if language == "English" else _ZH_SCALES)

    window = CORPUS_WINDOW
    width_deg = round(rng.uniform(0.3, 0.8), 4)
    height_deg = round(rng.uniform(0.25, 0.6), 4)
    west = round(rng.uniform(window.west, window.east - width_deg), 4)
    south = round(rng.uniform(window.south, window.north - height_deg), 4)
    lonlat = LonLatRange(west, round(west + width_deg, 4), south, round(south + height_deg, 4))

    table = load_lithology_table(language)
    n_units = n_legend_units or rng.randint(5, 7)
    rows = rng.sample(list(table.rows), n_units)
    palette = _sample_palette(rng, n_units)
    legend = []
    used_names: set[str] = set()
    for (cls_, sub, lith), color in zip(rows, palette):
        if language == "English":
            name = f"{rng.choice(_EN_ROCK_MODIFIERS)} {lith}"
            while name in used_names:
                name = f"{rng.choice(_EN_ROCK_MODIFIERS)} {lith}"
        else:
            name = lith
        used_names.add(name)
        legend.append(LegendSpec(name, color, lith, rng.choice(_AGES)))

    fracs = _sample_fractions(rng, n_units)
    rock_areas = {u.rock_name: f for u, f in zip(legend, fracs)}

    while True:
        grid = tuple(tuple(rng.random() < 0.45 for _ in range(3)) for _ in range(3))
        flat = [v for row in grid for v in row]
        if any(flat) and not all(flat):
            break

    return FixtureSpec(
        map_id=map_id or f"map_{seed:03d}",
        size=size,
        language=language,
        sheet_name=sheet_name,
        scale=scale,
        lonlat=lonlat,
        neighbors=neighbors,
        components=tuple(k for k in NAMED_COMPONENT_KINDS if k in set(components)),
        legend=tuple(legend),
        rock_areas=rock_areas,
        fault_grid=grid,
    )


def _ascii(s: str) -> str:
    # the built-in bitmap font only covers latin; metadata keeps the real text
    return s.encode("ascii", "replace").decode("ascii")


def _component_boxes(spec: FixtureSpec) -> dict[str, BBox]:
    s = spec.size
    boxes = {}
    for kind in spec.components:
        fx0, fy0, fx1, fy1 = _LAYOUT[kind]
        boxes[kind] = BBox(round(fx0 * s), round(fy0 * s), round(fx1 * s), round(fy1 * s))
    return boxes


def _legend_unit_boxes(spec: FixtureSpec, legend_box: BBox) -> list[tuple[BBox, BBox]]:
    n = len(spec.legend)
    pad = max(4, spec.size // 128)
    inner_h = legend_box.height - 2 * pad
    row_h = inner_h / n
    if row_h < 10:
        raise ValueError(
            f"legend overflow: {n} units do not fit a {legend_box.height:.0f}px legend"
        )
    swatch_w = int(legend_box.width * 0.22)
    pairs = []
    for i in range(n):
        top = int(legend_box.y_min + pad + i * row_h)
        bottom = int(legend_box.y_min + pad + (i + 1) * row_h) - 3
        color_box = BBox(legend_box.x_min + pad, top, legend_box.x_min + pad + swatch_w, bottom)
        text_box = BBox(
            legend_box.x_min + pad + swatch_w + 6, top, legend_box.x_max - pad, bottom
        )
        pairs.append((text_box, color_box))
    return pairs


def render_fixture(spec: FixtureSpec) -> tuple[np.ndarray, MapMetadata]:
    """Draw the map and produce the exactly matching metadata."""
    s = spec.size
    if s < 256:
        raise ValueError(f"fixture size {s} too small to lay out components (min 256)")
    boxes = _component_boxes(spec)
    arr = np.full((s, s, 3), _BG_COLOR, dtype=np.uint8)

    # rock strips fill the whole main-map box so pixel fractions match the
    # requested area fractions up to rounding
    main = boxes.get("main_map")
    if main is not None:
        x0, y0, x1, y1 = main.as_int_list()
        width = x1 - x0
        cum = 0.0
        edges = [x0]
        for unit in spec.legend:
            cum += spec.rock_areas[unit.rock_name]
            edges.append(x0 + int(round(cum * width)))
        edges[-1] = x1
        for unit, (a, b) in zip(spec.legend, zip(edges, edges[1:])):
            arr[y0:y1, a:b] = unit.color

    legend_pairs: list[tuple[BBox, BBox]] = []
    legend_box = boxes.get("legend")
    if legend_box is not None:
        legend_pairs = _legend_unit_boxes(spec, legend_box)
        for (text_box, color_box), unit in zip(legend_pairs, spec.legend):
            cx0, cy0, cx1, cy1 = color_box.as_int_list()
            arr[cy0:cy1, cx0:cx1] = unit.color

    img = Image.fromarray(arr)
    draw = ImageDraw.Draw(img)

    for kind, box in boxes.items():
        bx0, by0, bx1, by1 = box.as_int_list()
        if kind == "main_map":
            # outline sits outside the box to keep interior pixel counts exact
            draw.rectangle((bx0 - 1, by0 - 1, bx1, by1), outline=_INK)
        else:
            draw.rectangle((bx0, by0, bx1 - 1, by1 - 1), outline=_INK)

    if "title" in boxes:
        b = boxes["title"]
        draw.text((b.x_min + 8, b.y_min + 6), _ascii(spec.sheet_name.upper()), fill=_INK)
        draw.text((b.x_min + 8, b.y_min + 20), "GEOLOGIC MAP", fill=_INK)
    if "scale" in boxes:
        b = boxes["scale"]
        draw.text((b.x_min + 6, b.y_min + 4), f"SCALE {spec.scale}", fill=_INK)
        bar_y = int(b.y_min + b.height * 0.7)
        draw.line((b.x_min + 6, bar_y, b.x_max - 6, bar_y), fill=_INK, width=2)
    if main is not None:
        # corner coordinate labels drawn just outside the main map
        draw.text((main.x_min, main.y_min - 12), f"{spec.lonlat.west} {spec.lonlat.north}", fill=_INK)
        draw.text((main.x_min, main.y_max + 2), f"{spec.lonlat.west} {spec.lonlat.south}", fill=_INK)

    if legend_box is not None:
        for (text_box, color_box), unit in zip(legend_pairs, spec.legend):
            cx0, cy0, cx1, cy1 = color_box.as_int_list()
            draw.rectangle((cx0, cy0, cx1 - 1, cy1 - 1), outline=_INK)
            draw.text((text_box.x_min + 2, text_box.y_min + 2), _ascii(unit.rock_name), fill=_INK)

    if "index_map" in boxes:
        b = boxes["index_map"]
        bx0, by0, bx1, by1 = b.as_int_list()
        for i in range(1, 3):
            x = bx0 + (bx1 - bx0) * i // 3
            y = by0 + (by1 - by0) * i // 3
            draw.line((x, by0, x, by1 - 1), fill=_INK)
            draw.line((bx0, y, bx1 - 1, y), fill=_INK)
        ccx0 = bx0 + (bx1 - bx0) // 3 + 1
        ccy0 = by0 + (by1 - by0) // 3 + 1
        ccx1 = bx0 + (bx1 - bx0) * 2 // 3 - 1
        ccy1 = by0 + (by1 - by0) * 2 // 3 - 1
        draw.rectangle((ccx0, ccy0, ccx1, ccy1), fill=(200, 200, 200))
        cells = [(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
        for name, (r, c) in zip(spec.neighbors, cells):
            tx = bx0 + (bx1 - bx0) * c // 3 + 2
            ty = by0 + (by1 - by0) * r // 3 + 2
            draw.text((tx, ty), _ascii(name)[:8], fill=_INK)

    if main is not None and spec.fault_grid:
        x0, y0, x1, y1 = main.as_int_list()
        cw, ch = (x1 - x0) / 3, (y1 - y0) / 3
        lw = max(1, s // 512)
        for r in range(3):
            for c in range(3):
                if spec.fault_grid[r][c]:
                    ax = x0 + c * cw + 0.2 * cw
                    ay = y0 + r * ch + 0.8 * ch
                    bx = x0 + c * cw + 0.8 * cw
                    by = y0 + r * ch + 0.2 * ch
                    draw.line((ax, ay, bx, by), fill=(0, 0, 0), width=lw)

    if "cross_section" in boxes:
        b = boxes["cross_section"]
        bx0, by0, bx1, by1 = b.as_int_list()
        mid = (by0 + by1) // 2
        pts = []
        for i in range(9):
            px = bx0 + 8 + (bx1 - bx0 - 16) * i // 8
            py = mid + (8 if i % 2 else -8)
            pts.append((px, py))
        draw.line(pts, fill=_INK, width=1)
        draw.text((bx0 + 4, by0 + 2), "A", fill=_INK)
        draw.text((bx1 - 14, by0 + 2), "A'", fill=_INK)

    if "stratigraphic_column" in boxes:
        b = boxes["stratigraphic_column"]
        bx0, by0, bx1, by1 = b.as_int_list()
        n = len(spec.legend)
        for i, unit in enumerate(spec.legend):
            top = by0 + 2 + (by1 - by0 - 4) * i // n
            bottom = by0 + 2 + (by1 - by0 - 4) * (i + 1) // n
            draw.rectangle((bx0 + 4, top, bx0 + (bx1 - bx0) // 3, bottom - 1), fill=unit.color)

    out = np.asarray(img)

    components = tuple(Component(kind, boxes[kind], 1.0, {}) for kind in spec.components)
    legend_units = tuple(
        LegendUnit(
            text_bbox=text_box,
            color_bbox=color_box,
            rock_name=unit.rock_name,
            color=unit.color,
            lithology=unit.lithology,
            stratigraphic_age=unit.stratigraphic_age,
        )
        for (text_box, color_box), unit in zip(legend_pairs, spec.legend)
    )
    meta = MapMetadata(
        sheet_name=spec.sheet_name,
        scale=spec.scale,
        lonlat=spec.lonlat,
        neighbors=spec.neighbors,
        components=components,
        legend_units=legend_units,
        rock_areas=dict(spec.rock_areas),
        fault_grid=spec.fault_grid,
        language=spec.language,
    )
    return out, meta


def synth_fixture(
    seed: int, spec: Optional[FixtureSpec] = None, **overrides: Any
) -> tuple[np.ndarray, MapMetadata]:
    """Render a synthetic map: either from an explicit spec or from a seeded
    randomized one. Fixed seed, fixed bytes."""
    if spec is None:
        spec = make_fixture_spec(seed, **overrides)
    return render_fixture(spec)


def annotations_from_metadata(map_id: str, meta: MapMetadata, seed: int = 0) -> dict[str, Any]:
    """Detector annotation file mirroring the metadata, with plausible scores.
    All boxes are in full-image coordinates."""
    rng = random.Random(f"annotations:{map_id}:{seed}")
    components = [
        {"class": c.kind, "bbox": c.bbox.to_dict(), "score": round(rng.uniform(0.90, 0.99), 3)}
        for c in meta.components
    ]
    legend_units = []
    for unit in meta.legend_units:
        legend_units.append(
            {
                "class": "text_unit",
                "bbox": unit.text_bbox.to_dict(),
                "score": round(rng.uniform(0.85, 0.99), 3),
            }
        )
        legend_units.append(
            {
                "class": "color_unit",
                "bbox": unit.color_bbox.to_dict(),
                "score": round(rng.uniform(0.85, 0.99), 3),
            }
        )
    return {"map_id": map_id, "components": components, "legend_units": legend_units}


# ---------------------------------------------------------------------------
# tool-pool snapshots


def synth_snapshots(out_dir: str, seed: int = 42, window: LonLatRange = CORPUS_WINDOW) -> dict[str, str]:
    """Write the file-backed stand-ins for the live geo services: earthquake
    CSV, fault polylines, and the two rasters (population sum, land-cover
    histogram)."""
    rng = random.Random(f"snapshots:{seed}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pad = 1.0
    lo_lon, hi_lon = window.west - pad, window.east + pad
    lo_lat, hi_lat = window.south - pad, window.north + pad

    quake_path = out / "quakes.csv"
    lines = ["lon,lat,mag,year,depth"]
    for _ in range(250):
        lon = round(rng.uniform(lo_lon, hi_lon), 4)
        lat = round(rng.uniform(lo_lat, hi_lat), 4)
        mag = round(rng.uniform(1.5, 7.0), 1)
        year = rng.randint(1950, 2023)
        depth = "" if rng.random() < 0.3 else str(round(rng.uniform(1.0, 40.0), 1))
        lines.append(f"{lon},{lat},{mag},{year},{depth}")
    quake_path.write_text("\n".join(lines) + "\n", encoding="utf-8")

    faults_path = out / "faults.json"
    faults = []
    slips = ("strike-slip", "normal", "reverse", None)
    for _ in range(25):
        x = rng.uniform(lo_lon, hi_lon)
        y = rng.uniform(lo_lat, hi_lat)
        pts = [(round(x, 4), round(y, 4))]
        for _ in range(rng.randint(2, 5)):
            x += rng.uniform(-0.8, 0.8)
            y += rng.uniform(-0.8, 0.8)
            pts.append((round(x, 4), round(y, 4)))
        faults.append({"polyline": [list(p) for p in pts], "slip_type": rng.choice(slips)})
    faults_path.write_text(json.dumps({"faults": faults}, indent=2), encoding="utf-8")

    cell = 0.02
    width = int(round((hi_lon - lo_lon) / cell))
    height = int(round((hi_lat - lo_lat) / cell))
    np_rng = np.random.default_rng(seed)
    population = (np_rng.gamma(2.0, 40.0, size=(height, width))).astype(np.float32)
    landcover = np_rng.choice(
        np.array([10, 20, 30, 40, 50], dtype=np.float32),
        size=(height, width),
        p=[0.35, 0.25, 0.2, 0.15, 0.05],
    ).astype(np.float32)
    sidecar = {
        "west": lo_lon,
        "north": hi_lat,
        "cell_size_deg": cell,
        "width": width,
        "height": height,
        "dtype": "float32",
    }
    for name, grid in (("population", population), ("landcover", landcover)):
        grid.tofile(out / f"{name}.bin")
        (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")

    return {
        "quakes": str(quake_path),
        "faults": str(faults_path),
        "population": str(out / "population.bin"),
        "landcover": str(out / "landcover.bin"),
    }


def write_fixture_corpus(
    out_dir: str,
    count: int = 10,
    *,
    seed: int = 42,
    size: int = 1024,
    chinese_every: int = 4,
) -> list[str]:
    """Materialize a full corpus: maps/, metadata/, annotations/, specs/, and
    snapshots/. Returns the map ids in order."""
    out = Path(out_dir)
    for sub in ("maps", "metadata", "annotations", "specs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    map_ids = []
    for i in range(count):
        language = "Chinese" if chinese_every and (i + 1) % chinese_every == 0 else "English"
        map_id = f"map_{i:03d}"
        spec = make_fixture_spec(seed * 1000 + i, map_id=map_id, size=size, language=language)
        image, meta = render_fixture(spec)
        save_image(image, str(out / "maps" / f"{map_id}.png"))
        (out / "metadata" / f"{map_id}.json").write_text(
            json.dumps(meta.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        (out / "annotations" / f"{map_id}.json").write_text(
            json.dumps(annotations_from_metadata(map_id, meta, seed), indent=2, sort_keys=True)
            + "\n",
            encoding="utf-8",
        )
        (out / "specs" / f"{map_id}.json").write_text(
            json.dumps(spec.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )
        map_ids.append(map_id)
    synth_snapshots(str(out / "snapshots"), seed)
    return map_ids
