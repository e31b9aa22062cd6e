"""Hierarchical information extraction: divide a map into a component tree via
detector providers, extract per-component information through the backend, and
merge everything into global metadata.

Detector providers satisfy one contract — ``detect(map_id, stage, image,
region)`` returning detections in the frame of the supplied image/crop — and
come in two flavors: an annotation-file reader and a remote-endpoint client
(POST ``{DETECTOR_BASE_URL}/detect`` with ``{"map_id", "stage",
"image_png_b64"}``, response ``{"detections": [{"class", "bbox", "score"}]}``).
"""
from __future__ import annotations

import base64
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Mapping, Optional, Sequence

import numpy as np
import requests
from PIL import Image

from .backend import Backend, BackendError, CompletionRequest, ImageAttachment
from .core import (
    BASE_SYSTEM_PROMPT,
    BBox,
    COMPONENT_KINDS,
    Component,
    LegendUnit,
    LonLatRange,
    MapMetadata,
    NAMED_COMPONENT_KINDS,
    crop,
    validate_metadata,
)
from .scoring import iou_det, normalize_text

logger = logging.getLogger(__name__)

LEGEND_UNIT_CLASSES = ("text_unit", "color_unit")
DETECTION_STAGES = ("components", "legend_units")
NMS_IOU_THRESHOLD = 0.8

OCR_PROMPT = "Only output the OCR result of the given image."

_EXTRACT_REASK_SUFFIX = "\nRespond with JSON only."


class ProviderError(RuntimeError):
    """A detector provider could not produce detections."""


class ExtractionError(RuntimeError):
    """The backend produced no parseable extraction for a node."""


@dataclass(frozen=True)
class Detection:
    cls: str
    bbox: BBox
    score: float

    def to_dict(self) -> dict[str, Any]:
        return {"class": self.cls, "bbox": self.bbox.to_dict(), "score": self.score}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Detection":
        return cls(str(d["class"]), BBox.from_dict(d["bbox"]), float(d["score"]))


def _det_sort_key(d: Detection) -> tuple:
    # Score ties break on bbox lexicographic order so NMS output is
    # independent of input order.
    return (-d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.cls)


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class non-maximum suppression by descending score.

    Survivors of one class have pairwise IoU strictly below the threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in (0, 1], got {iou_threshold}")
    keep: list[Detection] = []
    for det in sorted(dets, key=_det_sort_key):
        suppressed = any(
            k.cls == det.cls and iou_det(k.bbox, det.bbox) >= iou_threshold for k in keep
        )
        if not suppressed:
            keep.append(det)
    return keep


class AnnotationFileProvider:
    """Reads per-map detection files: ``{"map_id", "components": [...],
    "legend_units": [...]}`` with all boxes in full-image coordinates. Legend
    detections requested for a crop are translated into the crop frame."""

    def __init__(self, annotations_dir: str) -> None:
        self.annotations_dir = Path(annotations_dir)

    def detect(
        self,
        map_id: str,
        stage: str,
        image: Optional[np.ndarray] = None,
        region: Optional[BBox] = None,
    ) -> list[Detection]:
        path = self.annotations_dir / f"{map_id}.json"
        if not path.exists():
            raise ProviderError(f"no annotation file for map id {map_id!r} at {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
        dets = [Detection.from_dict(d) for d in data.get(stage, ())]
        if region is not None:
            dets = [
                Detection(d.cls, d.bbox.translated(-region.x_min, -region.y_min), d.score)
                for d in dets
            ]
        return dets


class RemoteDetectorProvider:
    """Posts the image (or crop) to a detection endpoint; responses are already
    in the frame of the posted image."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        *,
        max_attempts: int = 3,
        timeout: float = 60.0,
        session: Optional[requests.Session] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        self.base_url = (base_url or os.environ.get("DETECTOR_BASE_URL", "")).rstrip("/")
        if not self.base_url:
            raise ValueError("remote detector needs a base URL (flag or DETECTOR_BASE_URL)")
        self.max_attempts = max_attempts
        self.timeout = timeout
        self._session = session or requests.Session()
        self._sleep = sleep

    def detect(
        self,
        map_id: str,
        stage: str,
        image: Optional[np.ndarray] = None,
        region: Optional[BBox] = None,
    ) -> list[Detection]:
        if image is None:
            raise ProviderError("remote detector needs the image to post")
        buf = io.BytesIO()
        Image.fromarray(np.asarray(image, dtype=np.uint8)).save(buf, format="PNG")
        body = {
            "map_id": map_id,
            "stage": stage,
            "image_png_b64": base64.b64encode(buf.getvalue()).decode("ascii"),
        }
        last_error: Optional[Exception] = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._session.post(f"{self.base_url}/detect", json=body, timeout=self.timeout)
                if resp.status_code >= 500:
                    raise requests.ConnectionError(f"server error {resp.status_code}")
                if resp.status_code != 200:
                    raise ProviderError(f"detector returned HTTP {resp.status_code}")
                return [Detection.from_dict(d) for d in resp.json()["detections"]]
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
                if attempt < self.max_attempts:
                    self._sleep(0.5 * 2 ** (attempt - 1))
        raise ProviderError(f"detector failed after {self.max_attempts} attempts: {last_error}")


def detect(
    provider,
    image: Optional[np.ndarray],
    stage: str,
    *,
    map_id: str,
    region: Optional[BBox] = None,
    iou_threshold: float = NMS_IOU_THRESHOLD,
) -> list[Detection]:
    """Run one detection stage through a provider and suppress duplicates."""
    if stage not in DETECTION_STAGES:
        raise ValueError(f"unknown detection stage {stage!r}")
    return nms(provider.detect(map_id, stage, image, region), iou_threshold)


# ---------------------------------------------------------------------------
# region tree


@dataclass
class LegendUnitNode:
    """Paired text/color legend-unit detection, boxes in root coordinates."""

    text_bbox: BBox
    color_bbox: BBox
    text_score: float
    color_score: float
    rock_name: Optional[str] = None
    color: Optional[tuple[int, int, int]] = None


@dataclass
class RegionNode:
    kind: str
    bbox: BBox
    score: float = 1.0
    info: dict[str, Any] = field(default_factory=dict)
    children: list[Any] = field(default_factory=list)


def pair_legend_units(
    dets: Sequence[Detection], color_side: str = "left"
) -> tuple[list[tuple[Detection, Detection]], list[Detection]]:
    """Pair each text unit with the nearest color unit by vertical-center
    distance, requiring the color swatch on the configured side of the text.
    Returns (pairs, orphans)."""
    texts = sorted(
        (d for d in dets if d.cls == "text_unit"),
        key=lambda d: ((d.bbox.y_min + d.bbox.y_max) / 2, d.bbox.x_min),
    )
    colors = [d for d in dets if d.cls == "color_unit"]
    used: set[int] = set()
    pairs: list[tuple[Detection, Detection]] = []
    orphans: list[Detection] = []
    for text in texts:
        tcx = (text.bbox.x_min + text.bbox.x_max) / 2
        tcy = (text.bbox.y_min + text.bbox.y_max) / 2
        best_idx, best_key = None, None
        for i, color in enumerate(colors):
            if i in used:
                continue
            ccx = (color.bbox.x_min + color.bbox.x_max) / 2
            if color_side == "left" and ccx >= tcx:
                continue
            if color_side == "right" and ccx <= tcx:
                continue
            ccy = (color.bbox.y_min + color.bbox.y_max) / 2
            key = (abs(ccy - tcy), abs(ccx - tcx))
            if best_key is None or key < best_key:
                best_idx, best_key = i, key
        if best_idx is None:
            orphans.append(text)
        else:
            used.add(best_idx)
            pairs.append((text, colors[best_idx]))
    orphans.extend(c for i, c in enumerate(colors) if i not in used)
    return pairs, orphans


def build_tree(
    image: np.ndarray | tuple[int, int],
    component_dets: Sequence[Detection],
    legend_dets: Sequence[Detection] = (),
    *,
    color_side: str = "left",
) -> RegionNode:
    """Assemble the region tree: whole image at the root, one node per
    surviving component (highest score wins per named kind), and paired
    legend-unit nodes under the legend.

    ``legend_dets`` are expected in legend-crop coordinates, as returned by
    the legend detection stage; they are translated back to root coordinates
    here."""
    if isinstance(image, tuple):
        width, height = image
    else:
        height, width = image.shape[:2]
    root = RegionNode("root", BBox(0, 0, width, height))

    best: dict[str, Detection] = {}
    extras: list[Detection] = []
    for det in sorted(component_dets, key=_det_sort_key):
        if det.cls == "other":
            extras.append(det)
        elif det.cls in NAMED_COMPONENT_KINDS:
            if det.cls not in best:
                best[det.cls] = det
            else:
                logger.info("dropping duplicate %s detection (score %.3f)", det.cls, det.score)
        else:
            logger.warning("ignoring detection with unknown class %r", det.cls)

    for kind in NAMED_COMPONENT_KINDS:
        if kind in best:
            det = best[kind]
            root.children.append(RegionNode(kind, det.bbox, det.score))
    for det in extras:
        root.children.append(RegionNode("other", det.bbox, det.score))

    legend_node = next((n for n in root.children if n.kind == "legend"), None)
    if legend_node is not None and legend_dets:
        pairs, orphans = pair_legend_units(legend_dets, color_side)
        if orphans:
            logger.warning("%d unpaired legend-unit detections excluded", len(orphans))
        ox, oy = legend_node.bbox.x_min, legend_node.bbox.y_min
        for text, color in pairs:
            legend_node.children.append(
                LegendUnitNode(
                    text_bbox=text.bbox.translated(ox, oy),
                    color_bbox=color.bbox.translated(ox, oy),
                    text_score=text.score,
                    color_score=color.score,
                )
            )
    return root


# ---------------------------------------------------------------------------
# per-node extraction


def load_extraction_schema(path: Optional[str] = None) -> dict[str, list[str]]:
    """Per-component field lists driving extraction prompts. The packaged file
    is an editable stand-in for a specialist-curated schema."""
    if path is not None:
        raw = Path(path).read_text(encoding="utf-8")
    else:
        raw = resources.files("geomapqa").joinpath("data", "extraction_schema.json").read_text(
            encoding="utf-8"
        )
    schema = json.loads(raw)
    return {k: list(v) for k, v in schema.items()}


def _extraction_instruction(kind: str, fields: Sequence[str]) -> str:
    example = json.dumps({f: "XXX" for f in fields})
    return (
        f"This image shows the {kind.replace('_', ' ')} component of a geologic map.\n"
        f"Extract the following fields: {', '.join(fields)}.\n"
        f"Respond in JSON format only, for example: {example}\n"
        "Use null for any field that cannot be read from the image."
    )


def _parse_json_document(raw: str) -> Optional[dict[str, Any]]:
    for candidate in (raw, _slice_braces(raw)):
        if candidate is None:
            continue
        try:
            doc = json.loads(candidate)
        except (json.JSONDecodeError, TypeError):
            continue
        if isinstance(doc, dict):
            return doc
    return None


def _slice_braces(raw: str) -> Optional[str]:
    start, end = raw.find("{"), raw.rfind("}")
    if 0 <= start < end:
        return raw[start : end + 1]
    return None


def extract_component(
    image: np.ndarray,
    node: RegionNode,
    fields: Sequence[str],
    backend: Backend,
    *,
    map_id: str,
    reasks: int = 2,
) -> dict[str, Any]:
    """Send the cropped component plus its field list; parse a JSON object
    keyed by those fields (absent fields become None)."""
    sub = crop(image, node.bbox)
    attachment = ImageAttachment.from_array(f"{map_id}:{node.kind}", sub)
    instruction = _extraction_instruction(node.kind, fields)
    for attempt in range(reasks + 1):
        req = CompletionRequest(
            system=BASE_SYSTEM_PROMPT,
            instruction=instruction if attempt == 0 else instruction + _EXTRACT_REASK_SUFFIX,
            images=(attachment,),
            json_mode=True,
        )
        raw = backend.complete(req)
        doc = _parse_json_document(raw)
        if doc is not None:
            return {f: doc.get(f) for f in fields}
        logger.warning("%s/%s: unparseable extraction (attempt %d)", map_id, node.kind, attempt + 1)
    raise ExtractionError(f"no parseable extraction for {map_id}:{node.kind} after {reasks + 1} attempts")


def median_color(swatch: np.ndarray) -> tuple[int, int, int]:
    """Per-channel median over interior pixels (1-pixel border eroded).
    Robust to salt-and-pepper contamination below 50%."""
    arr = np.asarray(swatch)
    if arr.shape[0] > 2 and arr.shape[1] > 2:
        arr = arr[1:-1, 1:-1]
    flat = arr.reshape(-1, arr.shape[-1])
    return tuple(int(v) for v in np.median(flat, axis=0))


def extract_legend_unit(
    text_crop: np.ndarray,
    color_crop: np.ndarray,
    backend: Backend,
    *,
    attachment_name: str = "legend:text",
) -> tuple[Optional[str], tuple[int, int, int]]:
    """OCR the text crop through the backend and take the median color of the
    swatch. OCR failure keeps the unit with a null rock name."""
    color = median_color(color_crop)
    req = CompletionRequest(
        system=BASE_SYSTEM_PROMPT,
        instruction=OCR_PROMPT,
        images=(ImageAttachment.from_array(attachment_name, text_crop),),
    )
    try:
        rock_name = backend.complete(req).strip().strip('"') or None
    except BackendError as exc:
        logger.warning("legend OCR failed (%s); keeping unit with null rock name", exc)
        rock_name = None
    return rock_name, color


# ---------------------------------------------------------------------------
# merge


def _parse_lonlat_info(info: Mapping[str, Any]) -> Optional[LonLatRange]:
    try:
        rng = LonLatRange(
            float(info["lon_west"]),
            float(info["lon_east"]),
            float(info["lat_south"]),
            float(info["lat_north"]),
        )
    except (KeyError, TypeError, ValueError):
        return None
    return rng if rng.is_valid() else None


def _parse_neighbors(value: Any) -> tuple[str, ...]:
    if value is None:
        return ()
    if isinstance(value, str):
        parts = [p.strip() for p in value.replace(";", ",").split(",")]
        return tuple(sorted(p for p in parts if p))
    try:
        return tuple(sorted(str(v) for v in value))
    except TypeError:
        return ()


def merge(root: RegionNode) -> MapMetadata:
    """Aggregate per-node info into global metadata. Total: any tree yields a
    MapMetadata; missing fields stay None. Rock areas and the fault grid are
    annotation-only and never produced here."""
    components = []
    title_info: Mapping[str, Any] = {}
    scale_info: Mapping[str, Any] = {}
    main_info: Mapping[str, Any] = {}
    index_info: Mapping[str, Any] = {}
    legend_units: list[LegendUnit] = []

    for node in root.children:
        if not isinstance(node, RegionNode):
            continue
        components.append(Component(node.kind, node.bbox, node.score, dict(node.info)))
        if node.kind == "title":
            title_info = node.info
        elif node.kind == "scale":
            scale_info = node.info
        elif node.kind == "main_map":
            main_info = node.info
        elif node.kind == "index_map":
            index_info = node.info
        elif node.kind == "legend":
            for unit in node.children:
                if isinstance(unit, LegendUnitNode):
                    legend_units.append(
                        LegendUnit(
                            text_bbox=unit.text_bbox,
                            color_bbox=unit.color_bbox,
                            rock_name=unit.rock_name,
                            color=unit.color or (0, 0, 0),
                        )
                    )

    raw_scale = scale_info.get("scale")
    scale = normalize_text(str(raw_scale)) if raw_scale else None
    language = title_info.get("language")
    return MapMetadata(
        sheet_name=title_info.get("sheet_name"),
        scale=scale,
        lonlat=_parse_lonlat_info(main_info),
        neighbors=_parse_neighbors(index_info.get("neighbors")),
        components=tuple(components),
        legend_units=tuple(legend_units),
        rock_areas={},
        fault_grid=None,
        language=str(language) if language else None,
    )


def digitize_map(
    map_id: str,
    image: np.ndarray,
    provider,
    backend: Backend,
    schema: Optional[Mapping[str, Sequence[str]]] = None,
    *,
    iou_threshold: float = NMS_IOU_THRESHOLD,
    color_side: str = "left",
) -> tuple[MapMetadata, list[dict[str, Any]]]:
    """Full divide-and-conquer pass over one map: detect components, detect
    legend units inside the legend crop, extract per node, merge.

    Extraction errors flag the node and continue; the audit trail records
    every skip and validation warning."""
    if schema is None:
        schema = load_extraction_schema()
    audit: list[dict[str, Any]] = []

    component_dets = detect(provider, image, "components", map_id=map_id, iou_threshold=iou_threshold)
    legend_det = next(
        (d for d in sorted(component_dets, key=_det_sort_key) if d.cls == "legend"), None
    )
    legend_dets: list[Detection] = []
    if legend_det is not None:
        legend_crop = crop(image, legend_det.bbox)
        legend_dets = detect(
            provider,
            legend_crop,
            "legend_units",
            map_id=map_id,
            region=legend_det.bbox,
            iou_threshold=iou_threshold,
        )
    root = build_tree(image, component_dets, legend_dets, color_side=color_side)

    for node in root.children:
        fields = list(schema.get(node.kind, ()))
        if not fields:
            continue
        try:
            node.info = extract_component(image, node, fields, backend, map_id=map_id)
        except (ExtractionError, BackendError) as exc:
            audit.append({"event": "extraction_error", "node": node.kind, "error": str(exc)})
            node.info = {}

    legend_node = next((n for n in root.children if n.kind == "legend"), None)
    if legend_node is not None:
        for unit in legend_node.children:
            name = (
                f"{map_id}:legend_text:{int(round(unit.text_bbox.x_min))}"
                f":{int(round(unit.text_bbox.y_min))}"
            )
            unit.rock_name, unit.color = extract_legend_unit(
                crop(image, unit.text_bbox),
                crop(image, unit.color_bbox),
                backend,
                attachment_name=name,
            )

    meta = merge(root)
    height, width = image.shape[:2]
    for warning in validate_metadata(meta, (width, height)):
        audit.append({"event": "validation_warning", "detail": warning})
    return meta, audit
