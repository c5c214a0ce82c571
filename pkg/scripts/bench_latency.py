#!/usr/bin/env python3
"""Latency comparison at retrieval scale: late_fusion vs artemis.

Times the three scoring phases (query encode, gallery precompute,
blocked pairwise scoring) and prints the complexity accounting next to
the measured wall-clock ratio.

    python3 scripts/bench_latency.py --queries 12000 --gallery 15000 --dim 512
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from emis.harness import BenchConfig, bench_latency
from emis.head import HeadDims, head_mac_count, head_param_count, init_params


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--queries", type=int, default=12000)
    parser.add_argument("--gallery", type=int, default=15000)
    parser.add_argument("--dim", type=int, default=512)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--block-size", type=int, default=1024)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="write the timing report as JSON")
    return parser.parse_args()


def main() -> int:
    args = parse_args()
    dims = HeadDims(args.dim, args.dim, args.dim)
    print(f"head parameters: {head_param_count(init_params(dims, 0)):,}")
    print(f"head MACs per triplet: {head_mac_count(dims):,}")

    bench = BenchConfig(n_queries=args.queries, gallery_size=args.gallery,
                        h_t=args.dim, h_i=args.dim, h_hidden=args.dim,
                        repeats=args.repeats, block_size=args.block_size,
                        seed=args.seed)
    report = bench_latency(bench)
    print()
    print(report.to_text())
    if args.out:
        Path(args.out).write_text(report.to_json(indent=2) + "\n",
                                  encoding="utf-8")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
