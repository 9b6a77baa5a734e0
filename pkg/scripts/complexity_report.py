"""Print the analytic/empirical cost report and an interval sweep table.

Usage:
    python3 scripts/complexity_report.py                 # default config
    python3 scripts/complexity_report.py --config cfg.json --out report.json
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from skiplift.analysis import analytic_skt, analytic_ssa, analytic_stt, cost_report
from skiplift.config import ModelConfig


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=None, help="model config JSON path")
    parser.add_argument("--out", default=None, help="write the report JSON here")
    parser.add_argument(
        "--intervals", default="1,3,5,7,9", help="comma-separated skip intervals"
    )
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    if args.config:
        config = ModelConfig.from_json(Path(args.config).read_text())
    else:
        config = ModelConfig()

    report = cost_report(config)
    print(report.to_json())

    f, d = config.frames, config.dim
    strided = analytic_stt(f, d, 3, 3)
    print()
    print(f"per-block MACs at T={f}, D={d} (strided-conv reference: {int(strided):,})")
    print(f"{'m':>3} {'attention':>14} {'block':>14} {'vs strided':>11}")
    for raw in args.intervals.split(","):
        m = int(raw)
        attn = analytic_ssa(f, d, m)
        block = analytic_skt(f, d, m)
        print(f"{m:>3} {float(attn):>14,.0f} {float(block):>14,.0f} "
              f"{float(block / strided):>10.3f}")

    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"\nwrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
