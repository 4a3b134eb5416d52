"""Ablation sweeps over the sync threshold, the refresh interval, and
block-size subsets.  Each sweep writes a CSV under the output directory."""

import argparse
import sys

from blockbatch.cli import main as cli_main


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task-seeds", default="0-19")
    ap.add_argument("--gen-len", type=int, default=256)
    ap.add_argument("--out", default="results/ablations")
    ap.add_argument("--all-subsets", action="store_true",
                    help="sweep every non-empty block-size subset "
                         "(64 runs per task set)")
    args = ap.parse_args()

    common = ["--task-seeds", args.task_seeds, "--gen-len", str(args.gen_len),
              "--out", args.out]
    sweeps = [
        ["--axis", "tau_sync", "--values", "2,4,8,16,32,64"],
        ["--axis", "refresh_interval", "--values", "8,16,32,64,128"],
    ]
    if args.all_subsets:
        sweeps.append(["--axis", "block_subset", "--all-subsets"])
    else:
        sweeps.append(["--axis", "block_subset",
                       "--values", "4,4+8,4+8+16,4+8+16+32+64+128"])
    for sweep in sweeps:
        rc = cli_main(["sweep"] + sweep + common)
        if rc != 0:
            return rc
    return 0


if __name__ == "__main__":
    sys.exit(run())
