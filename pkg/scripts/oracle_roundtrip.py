#!/usr/bin/env python3
"""Run the full offline pipeline over a fixture corpus with the oracle mock:
digitize -> gen-bench -> answer -> evaluate. Expects the layout produced by
make_fixture_corpus.py."""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from geomapqa.cli import main as cli_main


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--corpus", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--per-task", type=int, default=1)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    corpus = Path(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump({"replies": ['{"answer": "C"}'], "cycle": True}, fh)
        judge_script = fh.name

    steps = [
        [
            "digitize",
            "--maps", str(corpus / "maps"),
            "--annotations", str(corpus / "annotations"),
            "--metadata", str(corpus / "metadata"),
            "--backend", "oracle",
            "--out", str(out / "digitized"),
        ],
        [
            "gen-bench",
            "--metadata", str(corpus / "metadata"),
            "--snapshots", str(corpus / "snapshots"),
            "--seed", str(args.seed),
            "--per-task", str(args.per_task),
            "--out", str(out / "bench.json"),
        ],
        [
            "answer",
            "--bench", str(out / "bench.json"),
            "--maps", str(corpus / "maps"),
            "--metadata", str(out / "digitized"),
            "--snapshots", str(corpus / "snapshots"),
            "--backend", "oracle",
            "--out", str(out / "responses.json"),
        ],
        [
            "evaluate",
            "--bench", str(out / "bench.json"),
            "--responses", str(out / "responses.json"),
            "--maps", str(corpus / "maps"),
            "--backend", "scripted",
            "--script", judge_script,
            "--method", "oracle-pipeline",
            "--out", str(out / "scores"),
        ],
    ]
    for step in steps:
        print(f"== geomapqa {' '.join(step[:1])} ==")
        code = cli_main(step)
        if code != 0:
            print(f"step failed with exit code {code}", file=sys.stderr)
            return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
