"""Generate fully-logged traces and run the KV-space verification battery:
Monte-Carlo projection energy checks, refresh exactness, the fitted
recurrence bound, and the tangent-space distance decomposition."""

import argparse
import sys
from pathlib import Path

from blockbatch.cli import main as cli_main


def run():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--task-seeds", default="0-4")
    ap.add_argument("--gen-len", type=int, default=256)
    ap.add_argument("--refresh-interval", type=int, default=16)
    ap.add_argument("--trials", type=int, default=100_000)
    ap.add_argument("--out", default="results/diagnostics")
    args = ap.parse_args()

    out = Path(args.out)
    rc = cli_main(["run", "--task-seeds", args.task_seeds,
                   "--gen-len", str(args.gen_len),
                   "--refresh-interval", str(args.refresh_interval),
                   "--trace-level", "full", "--out", str(out)])
    if rc != 0:
        return rc
    traces = sorted(str(p) for p in out.glob("trace_blockbatch_task*.jsonl"))
    return cli_main(["diagnose"] + traces
                    + ["--refresh-interval", str(args.refresh_interval),
                       "--trials", str(args.trials), "--out", str(out)])


if __name__ == "__main__":
    sys.exit(run())
