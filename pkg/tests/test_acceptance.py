"""Acceptance criteria. Every criterion runs with mocks only (no network) and
prints one pass/fail line; tolerances are pinned here and nowhere else."""
from __future__ import annotations

import contextlib
import json
import logging
import random
import time
from pathlib import Path

import numpy as np
import pytest

from geomapqa.backend import ScriptedBackend
from geomapqa.baselines import uniform_random_responses
from geomapqa.benchgen import GenConfig, generate
from geomapqa.cli import main as cli_main
from geomapqa.core import (
    AnswerValue,
    BBox,
    BenchItem,
    EXACT_FITB_TASKS,
    GROUNDING_TASKS,
    LonLatRange,
)
from geomapqa.dki import QuakeRecord, query_quakes
from geomapqa.hie import Detection, median_color, nms
from geomapqa.peqa import build_prompt
from geomapqa.scoring import (
    AJ_INSTRUCTION_TEMPLATE,
    evaluate_bench,
    iou_det,
    iou_set_discrete,
    iou_set_rect,
    score_eq,
    score_overall,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(autouse=True)
def _quiet_warnings():
    # the random baseline legitimately triggers thousands of wrong-shape
    # warnings; keep the acceptance output readable
    logging.disable(logging.WARNING)
    yield
    logging.disable(logging.NOTSET)


@contextlib.contextmanager
def criterion(number: int, description: str):
    try:
        yield
    except BaseException:
        print(f"[ACCEPTANCE {number:02d}] FAIL — {description}")
        raise
    print(f"[ACCEPTANCE {number:02d}] PASS — {description}")


@pytest.fixture(scope="module")
def big_bench(corpus, templates):
    """Balanced 5000-item bench (200 per task) over the 10-map corpus."""
    metas = corpus.all_metadata()
    ordered = [metas[k] for k in sorted(metas)]
    items: list[BenchItem] = []
    for map_id in sorted(metas):
        items.extend(
            generate(
                metas[map_id],
                templates,
                GenConfig(seed=42, per_task=20),
                map_id=map_id,
                corpus=ordered,
                sources=corpus.sources(),
            )
        )
    return items


def test_criterion_1_metric_exactness():
    with criterion(1, "iou_det/iou_set_discrete/iou_set_rect match brute-force oracles"):
        start = time.monotonic()
        rng = np.random.default_rng(42)

        # box IoU vs pixel rasterization on integer boxes up to 1000^2
        for _ in range(1000):
            x0, y0, x1, y1 = rng.integers(0, 900, size=4)
            boxes = []
            for bx, by in ((x0, y0), (x1, y1)):
                w, h = rng.integers(1, 101, size=2)
                boxes.append(BBox(int(bx), int(by), int(bx + w), int(by + h)))
            a, b = boxes
            mask_a = np.zeros((1000, 1000), dtype=bool)
            mask_b = np.zeros((1000, 1000), dtype=bool)
            mask_a[int(a.y_min) : int(a.y_max), int(a.x_min) : int(a.x_max)] = True
            mask_b[int(b.y_min) : int(b.y_max), int(b.x_min) : int(b.x_max)] = True
            union = np.logical_or(mask_a, mask_b).sum()
            oracle = np.logical_and(mask_a, mask_b).sum() / union if union else 0.0
            assert abs(iou_det(a, b) - oracle) <= 1e-9

        # discrete set IoU vs enumeration, exact
        vocab = [f"region {i}" for i in range(30)]
        py_rng = random.Random("acceptance-sets")
        for _ in range(1000):
            sa = set(py_rng.sample(vocab, py_rng.randint(0, 12)))
            sb = set(py_rng.sample(vocab, py_rng.randint(0, 12)))
            if not sa and not sb:
                oracle = 1.0
            else:
                oracle = len(sa & sb) / len(sa | sb)
            assert iou_set_discrete(sa, sb) == oracle

        # rect IoU vs lattice rasterization (coordinates on a 0.01-degree
        # lattice so the cell count is exact), 1000 cases
        for _ in range(1000):
            def lattice_rect():
                w, h = rng.integers(10, 200, size=2)
                ox, oy = rng.integers(0, 200, size=2)
                return (int(ox), int(oy), int(ox + w), int(oy + h))

            ra = lattice_rect()
            rb = lattice_rect()
            hi_x = max(ra[2], rb[2])
            hi_y = max(ra[3], rb[3])
            ga = np.zeros((hi_y, hi_x), dtype=bool)
            gb = np.zeros((hi_y, hi_x), dtype=bool)
            ga[ra[1] : ra[3], ra[0] : ra[2]] = True
            gb[rb[1] : rb[3], rb[0] : rb[2]] = True
            union = np.logical_or(ga, gb).sum()
            oracle = np.logical_and(ga, gb).sum() / union if union else 0.0
            r1 = LonLatRange(ra[0] * 0.01, ra[2] * 0.01, ra[1] * 0.01, ra[3] * 0.01)
            r2 = LonLatRange(rb[0] * 0.01, rb[2] * 0.01, rb[1] * 0.01, rb[3] * 0.01)
            assert abs(iou_set_rect(r1, r2) - oracle) <= 1e-2

        # and 10 continuous cases against true Monte-Carlo with 1e6 samples
        for i in range(10):
            w1, h1, w2, h2 = rng.uniform(0.5, 3.0, size=4)
            ox, oy = rng.uniform(-10, 10, size=2)
            dx, dy = rng.uniform(-0.5, 0.5, size=2) * (w1 + w2) / 2
            r1 = LonLatRange(ox, ox + w1, oy, oy + h1)
            r2 = LonLatRange(ox + dx, ox + dx + w2, oy + dy, oy + dy + h2)
            mc_rng = np.random.default_rng(1000 + i)
            lon = mc_rng.uniform(min(r1.west, r2.west), max(r1.east, r2.east), 1_000_000)
            lat = mc_rng.uniform(min(r1.south, r2.south), max(r1.north, r2.north), 1_000_000)
            in1 = (lon >= r1.west) & (lon <= r1.east) & (lat >= r1.south) & (lat <= r1.north)
            in2 = (lon >= r2.west) & (lon <= r2.east) & (lat >= r2.south) & (lat <= r2.north)
            union = np.count_nonzero(in1 | in2)
            mc = np.count_nonzero(in1 & in2) / union if union else 0.0
            assert abs(iou_set_rect(r1, r2) - mc) <= 1e-2

        elapsed = time.monotonic() - start
        assert elapsed < 10.0, f"metric oracle sweep took {elapsed:.1f}s (budget 10s)"


def test_criterion_2_random_baseline(big_bench):
    with criterion(2, "seeded random responder reproduces the random-row structure"):
        assert len(big_bench) >= 2000
        from collections import Counter

        counts = Counter(i.task for i in big_bench)
        assert max(counts.values()) - min(counts.values()) <= 1  # balanced
        responses = uniform_random_responses(big_bench, seed=42)
        # reference-favoring judge: kept order -> A (reference wins),
        # swapped order -> B (candidate worse)
        judge = ScriptedBackend(['{"answer": "A"}', '{"answer": "B"}'], cycle=True)
        report = evaluate_bench(big_bench, responses, judge_backend=judge)
        assert report.per_ability["extracting"] == 0.0
        assert report.per_ability["grounding"] == 0.0
        assert report.per_ability["analyzing"] == 0.0
        assert abs(report.per_ability["referring"] - 0.25) <= 0.03
        assert abs(report.per_ability["reasoning"] - 0.25) <= 0.03
        assert abs(report.overall - 0.100) <= 0.012


def test_criterion_3_aggregation_spot_check():
    with criterion(3, "overall aggregation reproduces the published all-sets arithmetic"):
        value = score_overall([0.219, 0.128, 0.378, 0.507, 0.612])
        assert abs(value - 0.369) <= 5e-4


def test_criterion_4_oracle_round_trip(corpus, tmp_path):
    with criterion(4, "digitize->answer->evaluate oracle pipeline on the 10-map corpus"):
        start = time.monotonic()
        out = tmp_path / "pipeline"
        judge_script = tmp_path / "judge.json"
        judge_script.write_text(json.dumps({"replies": ['{"answer": "C"}'], "cycle": True}))

        assert cli_main(
            [
                "digitize",
                "--maps", str(corpus.maps_dir),
                "--annotations", str(corpus.annotations_dir),
                "--metadata", str(corpus.metadata_dir),
                "--backend", "oracle",
                "--out", str(out / "digitized"),
            ]
        ) == 0
        assert cli_main(
            [
                "gen-bench",
                "--metadata", str(corpus.metadata_dir),
                "--snapshots", str(corpus.snapshots_dir),
                "--seed", "42",
                "--per-task", "1",
                "--out", str(out / "bench.json"),
            ]
        ) == 0
        assert cli_main(
            [
                "answer",
                "--bench", str(out / "bench.json"),
                "--maps", str(corpus.maps_dir),
                "--metadata", str(out / "digitized"),
                "--backend", "oracle",
                "--out", str(out / "responses.json"),
            ]
        ) == 0
        assert cli_main(
            [
                "evaluate",
                "--bench", str(out / "bench.json"),
                "--responses", str(out / "responses.json"),
                "--maps", str(corpus.maps_dir),
                "--backend", "scripted",
                "--script", str(judge_script),
                "--out", str(out / "scores"),
            ]
        ) == 0

        report = json.loads((out / "scores" / "report.json").read_text())
        grounding_scores = []
        for task, mean in report["per_task"].items():
            if task in GROUNDING_TASKS:
                grounding_scores.append(mean)
            elif task in EXACT_FITB_TASKS or task in (
                "color_by_rock", "rock_by_color", "area_comparison", "fault_existence",
                "lithology_composition", "lonlat_localization", "lonlat", "index_map",
            ):
                assert mean == 1.0, f"{task} mean {mean}"
        assert sum(grounding_scores) / len(grounding_scores) >= 0.99
        assert report["per_ability"]["analyzing"] == 0.5
        elapsed = time.monotonic() - start
        assert elapsed < 120.0, f"oracle round trip took {elapsed:.1f}s (budget 120s)"


def test_criterion_5_order_debias_identity():
    with criterion(5, "constant-verdict judges score every essay pair exactly 0.5"):
        item = BenchItem(
            id="m:earthquake_risk:000", map_id="m", ability="analyzing",
            task="earthquake_risk", qtype="EQ", question_text="assess the risk",
            ground_truth=AnswerValue.essay("reference essay"),
        )
        for choice in ("A", "B", "C"):
            judge = ScriptedBackend([json.dumps({"answer": choice})], cycle=True)
            for candidate in ("short answer", "a different longer answer", "reference essay"):
                score, _, _ = score_eq(item, candidate, None, judge)
                assert score == 0.5


def test_criterion_6_median_color_robustness():
    with criterion(6, "median color exact under <=40% salt-and-pepper over 100 swatches"):
        rng = np.random.default_rng(606)
        for _ in range(100):
            height = int(rng.integers(24, 61))
            width = int(rng.integers(24, 61))
            true = tuple(int(v) for v in rng.integers(5, 251, size=3))
            swatch = np.full((height, width, 3), true, dtype=np.uint8)
            fraction = float(rng.uniform(0.0, 0.40))
            total = height * width
            n_noise = int(fraction * total)
            flat_idx = rng.choice(total, size=n_noise, replace=False)
            salt = rng.random(n_noise) < 0.5
            ys, xs = np.unravel_index(flat_idx, (height, width))
            swatch[ys[salt], xs[salt]] = 255
            swatch[ys[~salt], xs[~salt]] = 0
            assert median_color(swatch) == true


def test_criterion_7_quake_filter_fidelity():
    with criterion(7, "earthquake query equals the brute-force scan on 10,000 records"):
        rng = random.Random("acceptance-quakes")
        records = [
            QuakeRecord(
                lon=rng.uniform(-108.0, -98.0),
                lat=rng.uniform(32.0, 42.0),
                magnitude=round(rng.uniform(0.5, 8.0), 2),
                year=rng.randint(1950, 2024),
            )
            for _ in range(10_000)
        ]
        window = LonLatRange(-106.0, -100.0, 34.0, 40.0)
        got = query_quakes(records, window)
        brute = [
            r
            for r in records
            if r.magnitude > 2.5
            and r.year >= 1970
            and window.west <= r.lon <= window.east
            and window.south <= r.lat <= window.north
        ]
        assert set(got) == set(brute)
        assert len(got) == len(brute)


def test_criterion_8_nms_reference():
    with criterion(8, "NMS at 0.8 matches the quadratic reference, order-independent"):
        def reference(dets, threshold):
            kept = []
            ordered = sorted(
                dets,
                key=lambda d: (-d.score, d.bbox.x_min, d.bbox.y_min, d.bbox.x_max, d.bbox.y_max, d.cls),
            )
            for det in ordered:
                if all(
                    k.cls != det.cls or iou_det(k.bbox, det.bbox) < threshold for k in kept
                ):
                    kept.append(det)
            return kept

        rng = random.Random("acceptance-nms")
        classes = ["title", "scale", "legend", "main_map"]
        for _ in range(500):
            dets = []
            for _ in range(rng.randint(0, 30)):
                x0, y0 = rng.randint(0, 150), rng.randint(0, 150)
                dets.append(
                    Detection(
                        rng.choice(classes),
                        BBox(x0, y0, x0 + rng.randint(4, 60), y0 + rng.randint(4, 60)),
                        round(rng.random(), 3),
                    )
                )
            expected = reference(dets, 0.8)
            assert nms(dets, 0.8) == expected
            shuffled = dets[:]
            rng.shuffle(shuffled)
            assert nms(shuffled, 0.8) == expected


def test_criterion_9_prompt_byte_exactness(corpus):
    with criterion(9, "rendered QA and AJ prompts equal the reviewed golden files"):
        from test_peqa import demo_mcq, demo_meta
        from geomapqa.dki import KnowledgeEntry, KnowledgePacket

        knowledge = KnowledgePacket(
            [
                KnowledgeEntry(
                    "seismologist", "historical_earthquakes",
                    {"count": 3, "max_magnitude": 4.2},
                    {"source": "quakes.csv", "query": "range"},
                )
            ]
        )
        qa = build_prompt(demo_mcq(), demo_meta(), knowledge, []).instruction
        assert qa == (GOLDEN / "qa_prompt_mcq.txt").read_text(encoding="utf-8")
        assert "reason and answer the question in JSON format only" in qa
        aj = AJ_INSTRUCTION_TEMPLATE.format(
            question=(
                "Based on this geologic map, please analyze the seismic risk in this area "
                "from possibility and societal impact?"
            ),
            answer1="The area shows moderate risk given mapped faults.",
            answer2="Risk is low; no significant faults are present.",
        )
        assert aj == (GOLDEN / "aj_prompt.txt").read_text(encoding="utf-8")
        assert "Only respond answer with A, B or C" in aj


def test_criterion_10_ablation_plumbing(corpus, tmp_path):
    with criterion(10, "ablation table deterministic; all >= none on exact-match tasks"):
        bench = tmp_path / "bench.json"
        assert cli_main(
            [
                "gen-bench",
                "--metadata", str(corpus.metadata_dir),
                "--snapshots", str(corpus.snapshots_dir),
                "--seed", "42",
                "--per-task", "1",
                "--out", str(bench),
            ]
        ) == 0

        script = tmp_path / "script.json"
        script.write_text(
            json.dumps({"replies": ['{"reason": "fixed", "answer": "B"}'], "cycle": True})
        )
        tables = []
        for run in ("s1", "s2"):
            out = tmp_path / run
            assert cli_main(
                [
                    "ablate",
                    "--bench", str(bench),
                    "--maps", str(corpus.maps_dir),
                    "--metadata", str(corpus.metadata_dir),
                    "--toggle-sets", "all,HIE+DKI,HIE,none",
                    "--backend", "scripted",
                    "--script", str(script),
                    "--out", str(out),
                ]
            ) == 0
            tables.append((out / "ablation.txt").read_bytes())
        assert tables[0] == tables[1]
        header = tables[0].decode().splitlines()[0]
        for column in ("all", "HIE+DKI", "HIE", "none"):
            assert column in header

        # structural dominance under the oracle mock
        out = tmp_path / "oracle"
        assert cli_main(
            [
                "ablate",
                "--bench", str(bench),
                "--maps", str(corpus.maps_dir),
                "--metadata", str(corpus.metadata_dir),
                "--toggle-sets", "all,none",
                "--backend", "oracle",
                "--out", str(out),
            ]
        ) == 0
        doc = json.loads((out / "ablation.json").read_text())
        exact_tasks = set(EXACT_FITB_TASKS) | {
            "color_by_rock", "rock_by_color", "area_comparison", "fault_existence",
            "lithology_composition", "lonlat_localization",
        }
        for task in exact_tasks:
            assert doc["all"]["per_task"][task] >= doc["none"]["per_task"][task]
