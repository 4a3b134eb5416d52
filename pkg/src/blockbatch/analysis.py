"""Token-level characterization of branch outputs: bifurcation lengths,
cross-branch consensus, category agreement profiles, consensus seeding,
and the per-task best-block-size oracle."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .decoding import DecodeConfig, GenerationResult, single_branch_decode
from .errors import ContractError
from .model import ModelParams, Task, Vocab


@dataclass(frozen=True)
class BifurcationRecord:
    pair: tuple[int, int]          # block sizes (b_i, b_j)
    prefix_length: int
    divergence_position: int | None


@dataclass
class ConsensusMap:
    """Per generated position: which branches are present, their tokens,
    the modal token, and how many branches share it."""

    branch_labels: list[int]
    tokens: list[list[int | None]]   # [position][branch], None when absent
    modal: list[int | None]
    agreement: list[int]
    present: list[int]

    @property
    def n_branches(self) -> int:
        return len(self.branch_labels)

    def full_agreement_positions(self) -> list[int]:
        return [i for i in range(len(self.modal))
                if self.present[i] == self.n_branches
                and self.agreement[i] == self.n_branches]


def bifurcation_length(seq_a, seq_b) -> int:
    """Common generated-token prefix length; comparison runs to the shorter
    sequence."""
    n = min(len(seq_a), len(seq_b))
    for i in range(n):
        if seq_a[i] != seq_b[i]:
            return i
    return n


def bifurcation_records(outputs: dict[int, list[int]]) -> list[BifurcationRecord]:
    records = []
    for bi, bj in combinations(sorted(outputs), 2):
        a, b = outputs[bi], outputs[bj]
        prefix = bifurcation_length(a, b)
        diverged = prefix < min(len(a), len(b))
        records.append(BifurcationRecord((bi, bj), prefix,
                                         prefix if diverged else None))
    return records


def consensus_map(outputs: dict[int, list[int]]) -> ConsensusMap:
    if len(outputs) < 2:
        raise ContractError("consensus needs at least 2 branch outputs")
    labels = sorted(outputs)
    length = max(len(outputs[b]) for b in labels)
    tokens: list[list[int | None]] = []
    modal: list[int | None] = []
    agreement: list[int] = []
    present: list[int] = []
    for i in range(length):
        row = [outputs[b][i] if i < len(outputs[b]) else None for b in labels]
        committed = [t for t in row if t is not None]
        present.append(len(committed))
        if committed:
            values, counts = np.unique(committed, return_counts=True)
            best = int(values[counts.argmax()])  # ties: smallest token id
            modal.append(best)
            agreement.append(int(counts.max()))
        else:
            modal.append(None)
            agreement.append(0)
        tokens.append(row)
    return ConsensusMap(labels, tokens, modal, agreement, present)


def later_stage_consensus(cmap: ConsensusMap,
                          records: list[BifurcationRecord]) -> list[int]:
    """Full-agreement positions strictly after the earliest pairwise
    divergence.  Empty when no pair ever diverges."""
    diverged = [r.divergence_position for r in records
                if r.divergence_position is not None]
    if not diverged:
        return []
    cutoff = min(diverged)
    return [p for p in cmap.full_agreement_positions() if p > cutoff]


def category_agreement_profile(cmap: ConsensusMap, vocab: Vocab) -> dict:
    """Aggregate agreement by the category of each position's modal token."""
    profile: dict[str, dict] = {}
    for i, tok in enumerate(cmap.modal):
        if tok is None:
            continue
        cat = ("eos" if tok == vocab.eos_id else vocab.category_of.get(tok))
        if cat is None:
            continue
        row = profile.setdefault(cat, {"positions": 0, "histogram": {},
                                       "agreement_sum": 0.0})
        row["positions"] += 1
        k = cmap.agreement[i]
        row["histogram"][k] = row["histogram"].get(k, 0) + 1
        row["agreement_sum"] += k / cmap.present[i]
    for row in profile.values():
        row["mean_agreement"] = row.pop("agreement_sum") / row["positions"]
    return profile


def seeded_consensus_run(params: ModelParams, task: Task, cfg: DecodeConfig,
                         seeds: list[tuple[int, int]]) -> dict:
    """Decode with consensus positions pre-committed; report accuracy and
    NFE deltas against the unseeded baseline (positive delta_nfe means the
    seeded run was cheaper)."""
    baseline = single_branch_decode(params, task, cfg)
    seeded = single_branch_decode(params, task, cfg, preset=seeds)
    return {"baseline": baseline, "seeded": seeded,
            "delta_acc": int(seeded.correct) - int(baseline.correct),
            "delta_nfe": baseline.nfe.total - seeded.nfe.total,
            "n_seeds": len(seeds)}


def oracle_block_size(params: ModelParams, task: Task, cfg_template: DecodeConfig,
                      block_sizes: tuple[int, ...]) -> tuple[int, list[dict]]:
    """Best block size for this task: accuracy first, then lower NFE, then
    smaller size."""
    if not block_sizes:
        raise ContractError("oracle needs a non-empty block-size set")
    table = []
    for b in sorted(block_sizes):
        cfg = DecodeConfig(block_size=b, gen_len=cfg_template.gen_len,
                           tau_conf=cfg_template.tau_conf,
                           refresh_interval=cfg_template.refresh_interval)
        r = single_branch_decode(params, task, cfg)
        table.append({"block_size": b, "correct": bool(r.correct),
                      "nfe": r.nfe.total, "result": r})
    return best_block_entry(table)["block_size"], table


def best_block_entry(table: list[dict]) -> dict:
    """Tie rule: highest accuracy, then lowest NFE, then smallest size."""
    return min(table, key=lambda row: (-row["correct"], row["nfe"],
                                       row["block_size"]))


def generated_tokens(result: GenerationResult, vocab: Vocab) -> list[int]:
    """Generated tokens up to and including the first eos, masks excluded."""
    gen = result.row.tokens[result.row.prompt_len:]
    out = []
    for t in gen:
        t = int(t)
        if t == vocab.mask_id:
            break
        out.append(t)
        if t == vocab.eos_id:
            break
    return out


# ---- CSV emitters ---------------------------------------------------------

def write_bifurcation_csv(path, per_task_records: dict[int, list[BifurcationRecord]]):
    """One row per task, one column per block-size pair (prefix lengths)."""
    tasks = sorted(per_task_records)
    pairs = [r.pair for r in per_task_records[tasks[0]]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_seed"] + [f"b{p[0]}-b{p[1]}" for p in pairs])
        for t in tasks:
            recs = {r.pair: r for r in per_task_records[t]}
            w.writerow([t] + [recs[p].prefix_length for p in pairs])


def write_consensus_csv(path, cmap: ConsensusMap):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["position", "modal_token", "agreement", "present"]
                   + [f"b{b}" for b in cmap.branch_labels])
        for i in range(len(cmap.modal)):
            row = [i, cmap.modal[i], cmap.agreement[i], cmap.present[i]]
            row += ["" if t is None else t for t in cmap.tokens[i]]
            w.writerow(row)


def write_category_csv(path, profiles: list[dict]):
    """Average the per-task profiles into one row per category."""
    cats = sorted({c for p in profiles for c in p})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "mean_positions", "mean_agreement"])
        for cat in cats:
            rows = [p[cat] for p in profiles if cat in p]
            mean_pos = sum(r["positions"] for r in rows) / len(profiles)
            mean_agr = sum(r["mean_agreement"] for r in rows) / len(rows)
            w.writerow([cat, f"{mean_pos:.4f}", f"{mean_agr:.6f}"])


def write_oracle_csv(path, per_task: list[dict], block_sizes: tuple[int, ...]):
    """Per-task oracle pick plus the per-size accuracy/NFE grid."""
    sizes = sorted(block_sizes)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["task_seed", "oracle_block_size"]
        for b in sizes:
            header += [f"b{b}_correct", f"b{b}_nfe"]
        w.writerow(header)
        for entry in per_task:
            row = [entry["task_seed"], entry["oracle_block_size"]]
            table = {t["block_size"]: t for t in entry["table"]}
            for b in sizes:
                row += [int(table[b]["correct"]), table[b]["nfe"]]
            w.writerow(row)


def write_seeded_csv(path, per_task: list[dict]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_seed", "n_seeds", "baseline_correct", "baseline_nfe",
                    "seeded_correct", "seeded_nfe", "delta_acc", "delta_nfe"])
        for entry in per_task:
            rep = entry["report"]
            w.writerow([entry["task_seed"], rep["n_seeds"],
                        int(rep["baseline"].correct), rep["baseline"].nfe.total,
                        int(rep["seeded"].correct), rep["seeded"].nfe.total,
                        rep["delta_acc"], rep["delta_nfe"]])
