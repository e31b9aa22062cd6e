#!/usr/bin/env python3
"""Score the uniform-random baseline on a bench file.

Reproduces the analytic structure of the random row: ~0.25 on the two
multiple-choice abilities, 0 everywhere else (with a reference-favoring
judge), overall ~0.100.
"""
import argparse
import json
import logging
from pathlib import Path

from geomapqa.backend import ScriptedBackend
from geomapqa.baselines import uniform_random_responses
from geomapqa.core import BenchItem
from geomapqa.scoring import evaluate_bench


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bench", required=True)
    ap.add_argument("--out", help="optional report JSON destination")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()
    # junk answers trip one wrong-shape warning per item; keep the table readable
    logging.disable(logging.WARNING)

    doc = json.loads(Path(args.bench).read_text(encoding="utf-8"))
    items = [BenchItem.from_dict(d) for d in doc["items"]]
    responses = uniform_random_responses(items, seed=args.seed)
    # reference-favoring judge: first call (reference first) wins, swapped loses
    judge = ScriptedBackend(['{"answer": "A"}', '{"answer": "B"}'], cycle=True)
    report = evaluate_bench(items, responses, judge_backend=judge)
    print(report.to_text_table(method=f"random(seed={args.seed})"), end="")
    if args.out:
        Path(args.out).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )


if __name__ == "__main__":
    main()
