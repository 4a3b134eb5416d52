"""Run the NFE trend suite: branch-parallel decoding against the vanilla
one-token-per-forward baseline and every fixed block size.

Writes one summary CSV per mode under the output directory and prints the
accuracy and mean-NFE comparison.
"""

import argparse
import csv
import sys
from pathlib import Path

from blockbatch.cli import main as cli_main


def mode_stats(out: Path, mode: str) -> tuple[float, float]:
    with open(out / f"summary_{mode.replace(':', '_')}.csv") as fh:
        rows = list(csv.DictReader(fh))
    acc = sum(int(r["correct"]) for r in rows) / len(rows)
    nfe = sum(int(r["nfe_total"]) for r in rows) / len(rows)
    return acc, nfe


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task-seeds", default="0-99")
    ap.add_argument("--gen-len", type=int, default=256)
    ap.add_argument("--out", default="results/nfe_trend")
    args = ap.parse_args()

    out = Path(args.out)
    modes = ["blockbatch", "vanilla"] + [f"single:{b}"
                                         for b in (4, 8, 16, 32, 64, 128)]
    for mode in modes:
        rc = cli_main(["run", "--mode", mode, "--task-seeds", args.task_seeds,
                       "--gen-len", str(args.gen_len), "--out", str(out)])
        if rc != 0:
            return rc

    print(f"\n{'mode':<12} {'accuracy':>8} {'mean NFE':>9}")
    for mode in modes:
        acc, nfe = mode_stats(out, mode)
        print(f"{mode:<12} {acc:>8.3f} {nfe:>9.1f}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
