#!/usr/bin/env python3
"""Materialize a synthetic map corpus for offline experiments.

Writes maps/, metadata/, annotations/, specs/, and snapshots/ under --out.
"""
import argparse

from geomapqa.benchgen import write_fixture_corpus


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=10)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--size", type=int, default=1024, help="map edge length in pixels")
    ap.add_argument(
        "--chinese-every", type=int, default=4, help="every Nth map uses the Chinese style (0 = none)"
    )
    args = ap.parse_args()
    ids = write_fixture_corpus(
        args.out, args.count, seed=args.seed, size=args.size, chinese_every=args.chinese_every
    )
    print(f"wrote {len(ids)} maps under {args.out}: {', '.join(ids)}")


if __name__ == "__main__":
    main()
