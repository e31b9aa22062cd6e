"""Command-line pipeline: digitize, gen-bench, answer, evaluate, report,
ablate.

Commands communicate only through documented JSON files, so any stage can be
swapped for external tooling. Exit codes: 0 success, 1 usage error, 2 data
error, 3 backend/tool error. Credentials come from the environment
(``MODEL_API_KEY``, ``MODEL_BASE_URL``, ``DETECTOR_BASE_URL``), never from
config files.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import numpy as np

from .backend import (
    Backend,
    BackendError,
    NullBackend,
    OracleBackend,
    RemoteBackend,
    ScriptedBackend,
)
from .benchgen import GenConfig, generate, load_templates
from .core import (
    ABILITIES,
    AnswerValue,
    BenchItem,
    MapMetadata,
    load_image,
    scaled_metadata,
)
from .dki import KnowledgeSources, ToolError, default_expert_group
from .hie import AnnotationFileProvider, ProviderError, RemoteDetectorProvider, digitize_map
from .peqa import Toggles, answer as answer_item
from .scoring import JudgeError, ScoreReport, evaluate_bench

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("remote", "oracle", "scripted", "null")
SCALE_FACTORS = {"1": 1.0, "1/2": 0.5, "1/4": 0.25}

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_BACKEND = 3


class UsageError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # noqa: D401
        raise UsageError(message)


def _dump_json(doc: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def _load_json(path: Path) -> Any:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _load_metadata_dir(metadata_dir: Optional[str]) -> dict[str, MapMetadata]:
    if not metadata_dir:
        return {}
    out: dict[str, MapMetadata] = {}
    for path in sorted(Path(metadata_dir).glob("*.json")):
        out[path.stem] = MapMetadata.from_dict(json.loads(path.read_text(encoding="utf-8")))
    return out


def _load_bench(path: str) -> list[BenchItem]:
    doc = _load_json(Path(path))
    return [BenchItem.from_dict(d) for d in doc["items"]]


class _ImageCache:
    def __init__(self, maps_dir: Optional[str], scale: float = 1.0) -> None:
        self.maps_dir = Path(maps_dir) if maps_dir else None
        self.scale = scale
        self._cache: dict[str, Optional[np.ndarray]] = {}

    def __call__(self, map_id: str) -> Optional[np.ndarray]:
        if map_id in self._cache:
            return self._cache[map_id]
        image = None
        if self.maps_dir is not None:
            path = self.maps_dir / f"{map_id}.png"
            if path.exists():
                image = load_image(str(path))
                if self.scale != 1.0:
                    from PIL import Image as _Image

                    h, w = image.shape[:2]
                    size = (max(1, round(w * self.scale)), max(1, round(h * self.scale)))
                    image = np.asarray(_Image.fromarray(image).resize(size, _Image.NEAREST))
        self._cache[map_id] = image
        return image


def _make_backend(
    kind: str,
    args: argparse.Namespace,
    *,
    metadata_by_map: Optional[Mapping[str, MapMetadata]] = None,
    items: Sequence[BenchItem] = (),
) -> Backend:
    if kind == "oracle":
        return OracleBackend(metadata_by_map or {}, items)
    if kind == "scripted":
        script_path = getattr(args, "script", None)
        if not script_path:
            raise UsageError("--backend scripted requires --script FILE")
        doc = _load_json(Path(script_path))
        return ScriptedBackend(doc["replies"], cycle=bool(doc.get("cycle", False)))
    if kind == "null":
        return NullBackend()
    if kind == "remote":
        try:
            return RemoteBackend(model=getattr(args, "model", "gpt-4o"))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    raise UsageError(f"unknown backend kind {kind!r}")


# ---------------------------------------------------------------------------
# commands


def cmd_digitize(args: argparse.Namespace) -> int:
    maps_dir = Path(args.maps)
    out_dir = Path(args.out)
    if args.ids:
        map_ids = list(args.ids)
        missing = [m for m in map_ids if not (maps_dir / f"{m}.png").exists()]
        if missing:
            raise DataError(f"unknown map id(s): {', '.join(sorted(missing))}")
    else:
        map_ids = sorted(p.stem for p in maps_dir.glob("*.png"))
        if not map_ids:
            raise DataError(f"no map images found under {maps_dir}")

    if args.detector == "remote":
        provider = RemoteDetectorProvider()
    else:
        if not args.annotations:
            raise UsageError("annotation-file detector requires --annotations DIR")
        provider = AnnotationFileProvider(args.annotations)

    metadata_by_map = _load_metadata_dir(args.metadata)
    backend = _make_backend(args.backend, args, metadata_by_map=metadata_by_map)

    audit_all: dict[str, Any] = {}
    for map_id in map_ids:
        image = load_image(str(maps_dir / f"{map_id}.png"))
        meta, audit = digitize_map(map_id, image, provider, backend)
        _dump_json(meta.to_dict(), out_dir / f"{map_id}.json")
        audit_all[map_id] = audit
    _dump_json(audit_all, out_dir / "digitize_audit.json")
    print(f"digitized {len(map_ids)} map(s) into {out_dir}")
    return EXIT_OK


def cmd_gen_bench(args: argparse.Namespace) -> int:
    metadata = _load_metadata_dir(args.metadata)
    if not metadata:
        raise DataError(f"no metadata files under {args.metadata}")
    templates = load_templates(args.templates)
    sources = KnowledgeSources(args.snapshots) if args.snapshots else None
    config = GenConfig(seed=args.seed, per_task=args.per_task)

    corpus = [metadata[k] for k in sorted(metadata)]
    items: list[BenchItem] = []
    for map_id in sorted(metadata):
        items.extend(
            generate(
                metadata[map_id], templates, config, map_id=map_id, corpus=corpus, sources=sources
            )
        )
    _dump_json({"items": [i.to_dict() for i in items]}, Path(args.out))
    print(f"generated {len(items)} items over {len(metadata)} map(s) -> {args.out}")
    return EXIT_OK


def _parse_scale(text: str) -> float:
    if text not in SCALE_FACTORS:
        raise UsageError(f"--scale must be one of {sorted(SCALE_FACTORS)}, got {text!r}")
    return SCALE_FACTORS[text]


def cmd_answer(args: argparse.Namespace) -> int:
    items = _load_bench(args.bench)
    if not items:
        raise DataError(f"bench file {args.bench} has no items")
    metadata_by_map = _load_metadata_dir(args.metadata)
    backend = _make_backend(args.backend, args, metadata_by_map=metadata_by_map, items=items)
    toggles = Toggles.parse(args.toggles)
    scale = _parse_scale(args.scale)
    images = _ImageCache(args.maps, scale)

    group = default_expert_group()
    sources = KnowledgeSources(args.snapshots) if args.snapshots else None
    if toggles.dki and sources is None:
        logger.warning("DKI toggled on but no --snapshots directory; knowledge injection disabled")

    def _run(item: BenchItem) -> tuple[str, dict[str, Any], dict[str, Any]]:
        image = images(item.map_id)
        if image is None:
            raise DataError(f"no map image for {item.map_id} under {args.maps}")
        meta = metadata_by_map.get(item.map_id)
        if meta is not None and scale != 1.0:
            meta = scaled_metadata(meta, scale)
        parsed, audit = answer_item(
            item,
            image,
            meta,
            backend,
            toggles=toggles,
            group=group if sources is not None else None,
            sources=sources,
        )
        record = {
            "item_id": item.id,
            "answer": parsed.answer.to_dict() if parsed.answer else None,
            "raw": parsed.raw,
            "parse_path": parsed.parse_path,
            "error": audit.get("error"),
        }
        return item.id, record, audit

    if args.parallel > 1:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_run, items))
    else:
        results = [_run(item) for item in items]
    results.sort(key=lambda r: r[0])

    responses = [record for _, record, _ in results]
    audits = [audit for _, _, audit in results]
    _dump_json({"toggles": toggles.label(), "responses": responses}, Path(args.out))
    if args.audit:
        _dump_json(audits, Path(args.audit))
    print(f"answered {len(items)} item(s) -> {args.out}")
    return EXIT_OK


def _load_responses(path: str, items: Sequence[BenchItem]) -> dict[str, Optional[AnswerValue]]:
    doc = _load_json(Path(path))
    records = doc.get("responses", [])
    if not records:
        raise DataError(f"responses file {path} is empty")
    known = {item.id for item in items}
    orphans = sorted(r["item_id"] for r in records if r["item_id"] not in known)
    if orphans:
        raise DataError(f"responses reference unknown item id(s): {', '.join(orphans)}")
    out: dict[str, Optional[AnswerValue]] = {}
    for record in records:
        raw_answer = record.get("answer")
        out[record["item_id"]] = AnswerValue.from_dict(raw_answer) if raw_answer else None
    return out


def _write_report(report: ScoreReport, out_dir: Path, method: str) -> None:
    _dump_json(report.to_dict(), out_dir / "report.json")
    (out_dir / "report.txt").write_text(report.to_text_table(method), encoding="utf-8")
    (out_dir / "report_tasks.csv").write_text(report.to_task_csv(), encoding="utf-8")


def cmd_evaluate(args: argparse.Namespace) -> int:
    items = _load_bench(args.bench)
    responses = _load_responses(args.responses, items)
    metadata_by_map = _load_metadata_dir(args.metadata)
    judge = _make_backend(args.backend, args, metadata_by_map=metadata_by_map, items=items)
    images = _ImageCache(args.maps)
    report = evaluate_bench(items, responses, judge_backend=judge, image_loader=images)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(report, out_dir, method=args.method)
    print(report.to_text_table(args.method), end="")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    report = ScoreReport.from_dict(_load_json(Path(args.report)))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_report(report, out_dir, method=args.method)
    print(report.to_text_table(args.method), end="")
    return EXIT_OK


_ABILITY_SHORT = {
    "extracting": "Ext.",
    "grounding": "Gro.",
    "referring": "Ref.",
    "reasoning": "Rea.",
    "analyzing": "Ana.",
}


def _ablation_table(columns: list[str], per_column: dict[str, ScoreReport]) -> str:
    lines = [f"{'Ability':<12}" + "".join(f"{c:>16}" for c in columns)]
    for ability in ABILITIES:
        row = [f"{_ABILITY_SHORT[ability]:<12}"]
        for column in columns:
            value = per_column[column].per_ability.get(ability)
            row.append(f"{value:>16.3f}" if value is not None else f"{'-':>16}")
        lines.append("".join(row))
    row = [f"{'Ove.':<12}"]
    for column in columns:
        overall = per_column[column].overall
        row.append(f"{overall:>16.3f}" if overall is not None else f"{'-':>16}")
    lines.append("".join(row))
    return "\n".join(lines) + "\n"


def cmd_ablate(args: argparse.Namespace) -> int:
    toggle_sets = [t.strip() for t in (args.toggle_sets or "").split(",") if t.strip()]
    scales = [s.strip() for s in (args.scales or "").split(",") if s.strip()]
    if toggle_sets and scales:
        raise UsageError("pass either --toggle-sets or --scales, not both")
    variants = toggle_sets or scales
    if len(variants) < 2:
        raise UsageError("ablation needs at least 2 toggle sets (or scales)")

    out_dir = Path(args.out)
    per_column: dict[str, ScoreReport] = {}
    for variant in variants:
        when_scales = bool(scales)
        sub = out_dir / variant.replace("/", "_").replace("+", "_")
        sub.mkdir(parents=True, exist_ok=True)
        ns = argparse.Namespace(**vars(args))
        ns.out = str(sub / "responses.json")
        ns.audit = None
        ns.toggles = "all" if when_scales else variant
        ns.scale = variant if when_scales else "1"
        ns.parallel = args.parallel
        cmd_answer(ns)

        ev = argparse.Namespace(**vars(args))
        ev.responses = str(sub / "responses.json")
        ev.out = str(sub)
        ev.method = variant
        cmd_evaluate(ev)
        per_column[variant] = ScoreReport.from_dict(_load_json(sub / "report.json"))

    table = _ablation_table(variants, per_column)
    (out_dir / "ablation.txt").write_text(table, encoding="utf-8")
    _dump_json(
        {v: per_column[v].to_dict() for v in variants}, out_dir / "ablation.json"
    )
    print(table, end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

# flags every command line can also draw from a --config JSON file; config
# fills whatever the command line left unset, hard defaults apply last
_COMMAND_RULES: dict[str, tuple[tuple[str, ...], dict[str, Any]]] = {
    "digitize": (("maps", "out"), {"detector": "annotations", "backend": "oracle", "model": "gpt-4o"}),
    "gen-bench": (("metadata", "out"), {"seed": 42, "per_task": 1}),
    "answer": (
        ("bench", "maps", "out"),
        {"backend": "oracle", "model": "gpt-4o", "toggles": "all", "scale": "1", "parallel": 1},
    ),
    "evaluate": (
        ("bench", "responses", "out"),
        {"backend": "oracle", "model": "gpt-4o", "method": "responses"},
    ),
    "report": (("report", "out"), {"method": "responses"}),
    "ablate": (
        ("bench", "maps", "out"),
        {"backend": "oracle", "model": "gpt-4o", "parallel": 1, "method": "responses"},
    ),
}


def build_parser() -> _Parser:
    parser = _Parser(prog="geomapqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backend", choices=BACKEND_KINDS)
        p.add_argument("--script", help="transcript file for the scripted backend")
        p.add_argument("--model")

    def common_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON file supplying defaults for unset flags")
        p.add_argument("--out")

    p = sub.add_parser("digitize", help="detect components and extract metadata per map")
    p.add_argument("ids", nargs="*", help="map ids (default: every PNG in --maps)")
    p.add_argument("--maps", help="directory of <map_id>.png images")
    p.add_argument("--annotations", help="directory of detector annotation files")
    p.add_argument("--detector", choices=("annotations", "remote"))
    p.add_argument("--metadata", help="reference metadata dir (oracle backend)")
    backend_flags(p)
    common_flags(p)
    p.set_defaults(func=cmd_digitize)

    p = sub.add_parser("gen-bench", help="generate benchmark items from metadata")
    p.add_argument("--metadata")
    p.add_argument("--templates", help="task template JSON (default: packaged)")
    p.add_argument("--snapshots", help="tool-pool snapshot dir (reference essays)")
    p.add_argument("--seed", type=int)
    p.add_argument("--per-task", type=int, dest="per_task")
    common_flags(p)
    p.set_defaults(func=cmd_gen_bench)

    p = sub.add_parser("answer", help="answer bench items with the configured backend")
    p.add_argument("--bench")
    p.add_argument("--maps")
    p.add_argument("--metadata", help="digitized metadata dir (HIE context)")
    p.add_argument("--snapshots", help="tool-pool snapshot dir (DKI)")
    backend_flags(p)
    p.add_argument("--toggles", help="all | none | HIE[+DKI[+PEQA]]")
    p.add_argument("--scale", help="resolution scale: 1, 1/2, or 1/4")
    p.add_argument("--parallel", type=int)
    p.add_argument("--audit", help="also write per-item audit records here")
    common_flags(p)
    p.set_defaults(func=cmd_answer)

    p = sub.add_parser("evaluate", help="score responses against a bench file")
    p.add_argument("--bench")
    p.add_argument("--responses")
    p.add_argument("--maps", help="map images (attached to essay judging)")
    p.add_argument("--metadata", help="reference metadata dir (oracle judge)")
    backend_flags(p)
    p.add_argument("--method", help="row label in the report table")
    common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="re-emit table and CSV from a report JSON")
    p.add_argument("--report")
    p.add_argument("--method")
    common_flags(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", help="answer+evaluate across toggle sets or scales")
    p.add_argument("--bench")
    p.add_argument("--maps")
    p.add_argument("--metadata")
    p.add_argument("--snapshots")
    backend_flags(p)
    p.add_argument("--toggle-sets", dest="toggle_sets", help='e.g. "all,HIE+DKI,HIE,none"')
    p.add_argument("--scales", help='e.g. "1,1/2,1/4"')
    p.add_argument("--parallel", type=int)
    p.add_argument("--method")
    common_flags(p)
    p.set_defaults(func=cmd_ablate)

    return parser


def _finalize_args(args: argparse.Namespace) -> None:
    required, defaults = _COMMAND_RULES[args.command]
    if getattr(args, "config", None):
        doc = _load_json(Path(args.config))
        if not isinstance(doc, dict):
            raise UsageError(f"config file {args.config} must hold a JSON object")
        for key, value in doc.items():
            attr = str(key).replace("-", "_")
            if attr != "config" and hasattr(args, attr) and getattr(args, attr) is None:
                setattr(args, attr, value)
    for key, value in defaults.items():
        if getattr(args, key, None) is None:
            setattr(args, key, value)
    missing = [k for k in required if not getattr(args, k, None)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required option(s): {flags}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _finalize_args(args)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (BackendError, ProviderError, ToolError, JudgeError) as exc:
        print(f"backend/tool error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
