"""
Run the memory-mode sweep and print a per-mode summary of the resulting CSV.

    python scripts/mode_benchmark.py --config configs/bench.txt --out bench.csv
"""

import argparse
import csv
import sys

from tnkit.cli import main as cli_main


def summarize(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    keys = ("bond_dim", "phase", "traced", "auto_stack", "auto_unbind", "inline_mats")
    print(" ".join(f"{k:>11}" for k in keys) + f" {'median ms':>10} {'first ms':>9} {'peak MB':>8}")
    for r in sorted(rows, key=lambda r: tuple(r[k] for k in keys)):
        print(" ".join(f"{r[k]:>11}" for k in keys)
              + f" {float(r['wall_ms_median']):>10.1f} {float(r['first_call_ms']):>9.1f}"
              + f" {int(r['peak_live_tensor_bytes']) / 1e6:>8.1f}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    p.add_argument("--config", default="configs/bench.txt")
    p.add_argument("--out", default="bench.csv")
    args = p.parse_args()
    code = cli_main(["bench", "--config", args.config, "--out", args.out])
    if code:
        sys.exit(code)
    summarize(args.out)


if __name__ == "__main__":
    main()
