"""Experiment runner: single runs and suites, ablation sweeps, KV-space
diagnostics, and token-level analysis, all emitting traces and CSV reports.

Configuration precedence: command-line flags override the config file, which
overrides built-in defaults.  The config file is INI-style ``key = value``
sections; all sections are flattened.  The only environment variable read is
``BLOCKBATCH_OUT`` (default output directory).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
import time
from itertools import combinations
from pathlib import Path

import numpy as np

from . import analysis as an
from . import kvspace as kv
from .decoding import DecodeConfig, single_branch_decode, vanilla_decode
from .errors import ConfigError, ContractError, InsufficientDataError
from .model import Vocab, build_model, make_task
from .scheduler import (DEFAULT_BLOCK_SIZES, SchedulerConfig, read_trace,
                        run_blockbatch, write_trace)

DEFAULTS = {
    "block_sizes": "4,8,16,32,64,128",
    "tau_conf": 0.9,
    "tau_merge": 0.5,
    "tau_sync": 8,
    "refresh_interval": 32,
    "gen_len": 256,
    "prompt_len": 16,
    "model_seed": 0,
    "task_seeds": "0-19",
    "mode": "blockbatch",
    "trace_level": "norms",
    "out": None,
}


def parse_int_list(text: str) -> list[int]:
    """Comma-separated ints with optional inclusive ranges: "0-4,9" -> [0..4, 9]."""
    out: list[int] = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ConfigError("empty integer list")
    return out


def load_config_file(path: str) -> dict:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    merged: dict = {}
    for section in parser.sections():
        merged.update(dict(parser[section]))
    merged.update(dict(parser.defaults()))
    return merged


def resolve_settings(args: argparse.Namespace) -> dict:
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        file_values = load_config_file(args.config)
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_values)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    settings["block_sizes"] = tuple(parse_int_list(settings["block_sizes"]))
    settings["task_seeds"] = parse_int_list(settings["task_seeds"])
    for key in ("tau_conf", "tau_merge"):
        settings[key] = float(settings[key])
    for key in ("tau_sync", "refresh_interval", "gen_len", "prompt_len",
                "model_seed"):
        settings[key] = int(settings[key])
    if settings["trace_level"] not in ("norms", "full"):
        raise ConfigError(f"unknown trace level {settings['trace_level']!r}")
    out = settings["out"] or os.environ.get("BLOCKBATCH_OUT") or "results"
    settings["out"] = Path(out)
    return settings


def scheduler_config(settings: dict, log: bool = True) -> SchedulerConfig:
    return SchedulerConfig(
        block_sizes=settings["block_sizes"],
        tau_conf=settings["tau_conf"],
        tau_merge=settings["tau_merge"],
        tau_sync=settings["tau_sync"],
        refresh_interval=settings["refresh_interval"],
        gen_len=settings["gen_len"],
        log_kv=("none" if not log
                else ("full" if settings["trace_level"] == "full" else "norms")),
        log_consistency=log,
    )


def decode_config(settings: dict, block_size: int) -> DecodeConfig:
    return DecodeConfig(block_size=block_size, gen_len=settings["gen_len"],
                        tau_conf=settings["tau_conf"],
                        refresh_interval=settings["refresh_interval"])


def build_from_settings(settings: dict):
    vocab = Vocab()
    params = build_model(settings["model_seed"], vocab)
    return vocab, params


def run_one(mode: str, params, task, settings: dict, log: bool = True):
    if mode == "blockbatch":
        return run_blockbatch(params, task, scheduler_config(settings, log))
    if mode == "vanilla":
        return vanilla_decode(params, task, decode_config(settings,
                                                          settings["gen_len"]))
    if mode.startswith("single:"):
        b = int(mode.split(":", 1)[1])
        return single_branch_decode(params, task, decode_config(settings, b))
    if mode == "oracle":
        best, table = an.oracle_block_size(params, task,
                                           decode_config(settings, 4),
                                           settings["block_sizes"])
        for row in table:
            if row["block_size"] == best:
                return row["result"]
    raise ConfigError(f"unknown mode {mode!r}")


def write_summary(path, rows: list[dict]) -> None:
    fields = ["task_seed", "mode", "block_size", "correct", "tokens_decoded",
              "eos_position", "nfe_init", "nfe_block", "nfe_refresh",
              "nfe_total", "tokens"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def summary_row(seed: int, mode: str, result, vocab: Vocab) -> dict:
    return {"task_seed": seed, "mode": mode, "block_size": result.block_size,
            "correct": int(result.correct),
            "tokens_decoded": result.tokens_decoded,
            "eos_position": ("" if result.eos_position is None
                             else result.eos_position),
            "nfe_init": result.nfe.nfe_init, "nfe_block": result.nfe.nfe_block,
            "nfe_refresh": result.nfe.nfe_refresh, "nfe_total": result.nfe.total,
            "tokens": " ".join(str(t) for t in an.generated_tokens(result, vocab))}


def cmd_run(args) -> int:
    settings = resolve_settings(args)
    if not settings["task_seeds"]:
        raise ConfigError("task_seeds must be non-empty")
    vocab, params = build_from_settings(settings)
    out = settings["out"]
    out.mkdir(parents=True, exist_ok=True)
    mode = settings["mode"]
    rows = []
    started = time.perf_counter()
    for seed in settings["task_seeds"]:
        task = make_task(seed, settings["prompt_len"], settings["gen_len"], vocab)
        result = run_one(mode, params, task, settings)
        write_trace(out / f"trace_{mode.replace(':', '_')}_task{seed}.jsonl",
                    result.trace)
        rows.append(summary_row(seed, mode, result, vocab))
    write_summary(out / f"summary_{mode.replace(':', '_')}.csv", rows)
    elapsed = time.perf_counter() - started
    acc = sum(r["correct"] for r in rows) / len(rows)
    mean_nfe = sum(r["nfe_total"] for r in rows) / len(rows)
    print(f"{mode}: {len(rows)} tasks, accuracy {acc:.3f}, "
          f"mean NFE {mean_nfe:.1f}, wall time {elapsed:.1f}s")
    print(f"wrote {out / ('summary_' + mode.replace(':', '_') + '.csv')}")
    return 0


def _subset_values(args, block_sizes: tuple[int, ...]) -> list[tuple[int, ...]]:
    if getattr(args, "all_subsets", False):
        subsets = []
        for k in range(1, len(block_sizes) + 1):
            subsets.extend(combinations(block_sizes, k))
        return subsets
    return [tuple(parse_int_list(v.replace("+", ","))) for v in args.values.split(",")]


def cmd_sweep(args) -> int:
    settings = resolve_settings(args)
    vocab, params = build_from_settings(settings)
    out = settings["out"]
    out.mkdir(parents=True, exist_ok=True)
    axis = args.axis
    started = time.perf_counter()
    if axis == "block_subset":
        values = _subset_values(args, settings["block_sizes"])
    else:
        if not args.values:
            raise ConfigError("--values is required for this axis")
        values = parse_int_list(args.values)
    rows = []
    for value in values:
        local = dict(settings)
        if axis == "tau_sync":
            local["tau_sync"] = int(value)
        elif axis == "refresh_interval":
            local["refresh_interval"] = int(value)
        elif axis == "block_subset":
            local["block_sizes"] = tuple(value)
        else:
            raise ConfigError(f"unknown sweep axis {axis!r}")
        correct = nfe = 0
        for seed in local["task_seeds"]:
            task = make_task(seed, local["prompt_len"], local["gen_len"], vocab)
            result = run_one("blockbatch", params, task, local, log=False)
            correct += result.correct
            nfe += result.nfe.total
        n = len(local["task_seeds"])
        label = ("+".join(str(b) for b in value) if axis == "block_subset"
                 else value)
        rows.append({"value": label, "accuracy": f"{correct / n:.4f}",
                     "mean_nfe": f"{nfe / n:.2f}"})
        print(f"{axis}={label}: accuracy {correct / n:.3f}, mean NFE {nfe / n:.1f}")
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["value", "accuracy", "mean_nfe"])
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {path} in {time.perf_counter() - started:.1f}s")
    return 0


def _check(report_lines: list[str], name: str, ok: bool, detail: str) -> bool:
    report_lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return ok


def run_lemma_checks(lines: list[str], trials: int = 100_000, seed: int = 11) -> bool:
    rng = np.random.Generator(np.random.Philox(key=seed))
    vec = rng.standard_normal(2 * 256 * 2 * 32)
    ok = True
    for m in (4, 8, 16, 32, 64, 128):
        mean, se = kv.block_projection_energy_mc(vec, m, 256, trials, seed=seed + m)
        target = m / 256
        within = abs(mean - target) <= max(3 * se, 0.01 * target)
        ok &= _check(lines, f"energy lemma m={m}", within,
                     f"mean {mean:.6f} target {target:.6f} se {se:.2e}")
        norm_mean, norm_se = kv.block_projection_norm_mc(vec, m, 256, trials,
                                                         seed=seed + m)
        ok &= _check(lines, f"jensen m={m}",
                     norm_mean <= np.sqrt(target) + 3 * norm_se,
                     f"mean norm fraction {norm_mean:.6f} vs "
                     f"sqrt(m/L) {np.sqrt(target):.6f}")
    return ok


def diagnose_trace(records: list[dict], lines: list[str],
                   refresh_interval: int) -> bool:
    ok = True
    events = kv.consistency_records(records)
    if not events:
        raise InsufficientDataError("trace has no consistency-error logs")
    branches = sorted({b for ev in events for b in ev["E_after"]})
    refresh_zero = all(ev["E_after"][b] <= 1e-9 for ev in events
                       if ev["kind"] == "refresh" for b in ev["E_after"])
    ok &= _check(lines, "refresh exactness", refresh_zero,
                 "E after every refresh <= 1e-9")
    total_violations = 0
    fitted_any = False
    for b in branches:
        try:
            pairs = kv.recurrence_pairs(records, b)
        except InsufficientDataError:
            continue
        fitted_any = True
        params = kv.estimate_recurrence_params(pairs["block_pairs"],
                                               pairs["refresh_pairs"],
                                               refresh_interval)
        report = kv.verify_refresh_bound(params, pairs["boundaries"])
        if report["applicable"]:
            total_violations += len(report["violations"])
        for j, cycle in enumerate(pairs["cycles"]):
            cyc = kv.within_cycle_bound_check(params, cycle, cycle[0])
            total_violations += len(cyc["violations"])
    if fitted_any:
        ok &= _check(lines, "fitted refresh bound", total_violations == 0,
                     f"{total_violations} violations across branches and cycles")
    try:
        drift = kv.block_vs_refresh_drift(records)
        if drift["skipped"]:
            lines.append("SKIP block-vs-refresh drift: zero refresh drift")
        else:
            ok &= _check(lines, "block-vs-refresh drift",
                         drift["refresh_dominates"],
                         f"block {drift['mean_block_delta']:.3f} vs "
                         f"refresh {drift['mean_refresh_delta']:.3f}")
    except InsufficientDataError:
        lines.append("SKIP block-vs-refresh drift: no kv delta norms")
    try:
        vectors = kv.kv_vectors_from_trace(records)
    except InsufficientDataError:
        vectors = None
        lines.append("SKIP tangent geometry: trace has no full KV dumps")
    if vectors is not None and len(vectors) >= 3:
        basis = kv.fit_basis(vectors[0], vectors)
        worst = 0.0
        mono = True
        checked = 0
        for i in range(min(len(vectors), 40)):
            for j in range(i + 1, min(len(vectors), 40)):
                d_proj, d = kv.projected_and_full_distance(vectors[i],
                                                           vectors[j], basis)
                hi = kv.tangent_projection(vectors[i], basis)
                hj = kv.tangent_projection(vectors[j], basis)
                resid = np.linalg.norm(
                    (vectors[i].data - vectors[j].data)
                    - ((vectors[i].data - vectors[j].data) @ basis.u0) * basis.u0
                    - ((vectors[i].data - vectors[j].data) @ basis.e1) * basis.e1
                    - ((vectors[i].data - vectors[j].data) @ basis.e2) * basis.e2)
                lhs = d ** 2
                rhs = d_proj ** 2 + resid ** 2
                if lhs > 0:
                    worst = max(worst, abs(lhs - rhs) / lhs)
                mono &= d_proj <= d + 1e-9
                checked += 1
        ok &= _check(lines, "pythagorean decomposition",
                     worst <= 1e-6 and mono,
                     f"{checked} pairs, worst relative error {worst:.2e}")
        coords = kv.tangent_trajectory(records, basis)
        lines.append(f"INFO tangent trajectory: {len(coords)} points, "
                     f"basis degenerate={basis.degenerate}")
    return ok


def cmd_diagnose(args) -> int:
    settings = resolve_settings(args)
    out = settings["out"]
    out.mkdir(parents=True, exist_ok=True)
    lines: list[str] = []
    ok = True
    if args.lemma_only:
        ok &= run_lemma_checks(lines, trials=args.trials)
    else:
        if not args.traces:
            raise ConfigError("diagnose needs trace files (or --lemma-only)")
        for path in args.traces:
            records = read_trace(path)
            lines.append(f"== {path}")
            ok &= diagnose_trace(records, lines, settings["refresh_interval"])
        ok &= run_lemma_checks(lines, trials=args.trials)
    report_path = out / "diagnose_report.txt"
    report_path.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"wrote {report_path}")
    return 0 if ok else 1


def cmd_analyze(args) -> int:
    settings = resolve_settings(args)
    vocab, params = build_from_settings(settings)
    out = settings["out"]
    out.mkdir(parents=True, exist_ok=True)
    sizes = settings["block_sizes"]
    started = time.perf_counter()
    per_task_bif = {}
    oracle_rows = []
    profiles = []
    seeded_rows = []
    seed_block = min(sizes)
    for seed in settings["task_seeds"]:
        task = make_task(seed, settings["prompt_len"], settings["gen_len"], vocab)
        best, table = an.oracle_block_size(params, task,
                                           decode_config(settings, seed_block),
                                           sizes)
        oracle_rows.append({"task_seed": seed, "oracle_block_size": best,
                            "table": table})
        outputs = {t["block_size"]: an.generated_tokens(t["result"], vocab)
                   for t in table}
        records = an.bifurcation_records(outputs)
        per_task_bif[seed] = records
        cmap = an.consensus_map(outputs)
        an.write_consensus_csv(out / f"consensus_task{seed}.csv", cmap)
        profiles.append(an.category_agreement_profile(cmap, vocab))
        later = an.later_stage_consensus(cmap, records)
        seeds = [(p + task.prompt_len, cmap.modal[p])
                 for p in later[:args.max_seeds]]
        report = an.seeded_consensus_run(params, task,
                                         decode_config(settings, seed_block),
                                         seeds)
        seeded_rows.append({"task_seed": seed, "report": report})
    an.write_bifurcation_csv(out / "bifurcation.csv", per_task_bif)
    an.write_category_csv(out / "category_profile.csv", profiles)
    an.write_oracle_csv(out / "oracle.csv", oracle_rows, sizes)
    an.write_seeded_csv(out / "seeded_consensus.csv", seeded_rows)
    n = len(settings["task_seeds"])
    oracle_acc = sum(max(t["correct"] for t in row["table"])
                     for row in oracle_rows) / n
    mean_dnfe = sum(r["report"]["delta_nfe"] for r in seeded_rows) / n
    print(f"analyze: {n} tasks, oracle accuracy {oracle_acc:.3f}, "
          f"mean seeded delta-NFE {mean_dnfe:.1f}, "
          f"wall time {time.perf_counter() - started:.1f}s")
    return 0


def add_common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (key = value sections)")
    p.add_argument("--block-sizes", dest="block_sizes",
                   help="comma-separated block sizes")
    p.add_argument("--tau-conf", dest="tau_conf", type=float)
    p.add_argument("--tau-merge", dest="tau_merge", type=float)
    p.add_argument("--tau-sync", dest="tau_sync", type=int)
    p.add_argument("--refresh-interval", dest="refresh_interval", type=int)
    p.add_argument("--gen-len", dest="gen_len", type=int)
    p.add_argument("--prompt-len", dest="prompt_len", type=int)
    p.add_argument("--model-seed", dest="model_seed", type=int)
    p.add_argument("--task-seeds", dest="task_seeds",
                   help='e.g. "0-49" or "3,7,11"')
    p.add_argument("--mode", choices=None,
                   help="blockbatch | single:<b> | oracle | vanilla")
    p.add_argument("--trace-level", dest="trace_level",
                   choices=["norms", "full"])
    p.add_argument("--out", help="output directory (or $BLOCKBATCH_OUT)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="blockbatch",
        description="Branch-parallel block diffusion decoding experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="decode a task suite and write traces")
    add_common_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="ablation sweep over one axis")
    add_common_flags(p_sweep)
    p_sweep.add_argument("--axis", required=True,
                         choices=["tau_sync", "refresh_interval", "block_subset"])
    p_sweep.add_argument("--values",
                         help='axis values; block subsets as "4+8,4+8+16"')
    p_sweep.add_argument("--all-subsets", action="store_true",
                         help="enumerate every non-empty block-size subset")
    p_sweep.set_defaults(func=cmd_sweep)

    p_diag = sub.add_parser("diagnose", help="KV-space verification battery")
    add_common_flags(p_diag)
    p_diag.add_argument("traces", nargs="*", help="trace files to check")
    p_diag.add_argument("--lemma-only", action="store_true",
                        help="run only the Monte-Carlo energy checks")
    p_diag.add_argument("--trials", type=int, default=100_000)
    p_diag.set_defaults(func=cmd_diagnose)

    p_an = sub.add_parser("analyze", help="token-level branch analysis CSVs")
    add_common_flags(p_an)
    p_an.add_argument("--max-seeds", dest="max_seeds", type=int, default=32,
                      help="cap on pre-committed consensus positions")
    p_an.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ContractError, InsufficientDataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
