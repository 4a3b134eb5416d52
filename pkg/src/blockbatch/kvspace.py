"""Vector-space diagnostics over KV caches.

A branch's cache is flattened to a length-D vector (layer-major,
position-minor, key before value).  This module measures how far a maintained
cache drifts from the cache a full forward would produce, projects cache
trajectories into a low-dimensional tangent frame around an anchor, checks
the uniform-block projection energy identity by Monte Carlo, and fits and
verifies the refresh-contraction recurrence from logged consistency errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ContractError, DegenerateAnchorError,
                     InsufficientDataError)
from .model import KvCache, ModelParams, SequenceRow, full_forward, \
    kv_position_energy, kv_vectorize

ORTHO_TOL = 1e-9
PYTHAGOREAN_RTOL = 1e-6


@dataclass(frozen=True)
class KvVector:
    data: np.ndarray
    provenance: tuple = ()  # (branch, step, event kind)

    def __post_init__(self):
        if not np.isfinite(self.data).all():
            raise ContractError("KV vector contains non-finite entries")


@dataclass(frozen=True)
class ProjectionBasis:
    c0: np.ndarray
    u0: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    degenerate: bool = False

    def gram_defect(self) -> float:
        basis = np.stack([self.u0, self.e1, self.e2])
        return float(np.abs(basis @ basis.T - np.eye(3)).max())


@dataclass(frozen=True)
class TangentCoords:
    z: float
    a: float
    q: float
    h_norm: float


@dataclass(frozen=True)
class RefreshRecurrenceParams:
    lambda_b: float
    beta: float
    eps_B: float
    eps_F: float
    R: int

    @property
    def a_b(self) -> float:
        return 1.0 + self.lambda_b

    @property
    def rho(self) -> float:
        return self.beta * self.a_b ** self.R

    @property
    def c(self) -> float:
        geom = sum(self.a_b ** i for i in range(self.R))
        return self.beta * self.eps_B * geom + self.eps_F


def _vec(v) -> np.ndarray:
    return v.data if isinstance(v, KvVector) else np.asarray(v, dtype=float)


def cache_consistency_error(params: ModelParams, row: SequenceRow,
                            cache: KvCache,
                            target: np.ndarray | None = None) -> float:
    """E = ||vec(cache) - vec(F(x))|| for the row's current tokens."""
    _, fresh = full_forward(params, row, target)
    return float(np.linalg.norm(kv_vectorize(cache) - kv_vectorize(fresh)))


def fit_basis(anchor, samples: list) -> ProjectionBasis:
    """Anchor-axial direction plus the top-2 SVD directions of the centered
    residuals projected off the axial direction."""
    c0 = _vec(anchor)
    norm = np.linalg.norm(c0)
    if norm < ORTHO_TOL:
        raise DegenerateAnchorError("anchor vector is numerically zero")
    u0 = c0 / norm
    mats = np.array([_vec(s) for s in samples])
    if len(mats) < 2:
        raise ContractError("fit_basis needs at least 2 samples")
    if np.allclose(mats, c0, atol=ORTHO_TOL):
        return _complete_basis(u0, None, degenerate=True)
    centered = mats - mats.mean(axis=0)
    residuals = centered - np.outer(centered @ u0, u0)
    _, svals, vt = np.linalg.svd(residuals, full_matrices=False)
    e1 = _orthonormalize(vt[0], [u0]) if svals[0] > ORTHO_TOL else None
    if e1 is None:
        return _complete_basis(u0, None, degenerate=True)
    e2 = None
    if len(svals) > 1 and svals[1] > ORTHO_TOL * max(1.0, svals[0]):
        e2 = _orthonormalize(vt[1], [u0, e1])
    if e2 is None:
        basis = _complete_basis(u0, e1, degenerate=True)
        return ProjectionBasis(c0, u0, basis.e1, basis.e2, degenerate=True)
    return ProjectionBasis(c0, u0, e1, e2, degenerate=False)


def _orthonormalize(v: np.ndarray, against: list[np.ndarray]) -> np.ndarray | None:
    w = v.copy()
    for u in against:
        w -= (w @ u) * u
    n = np.linalg.norm(w)
    return w / n if n > ORTHO_TOL else None


def _complete_basis(u0: np.ndarray, e1: np.ndarray | None,
                    degenerate: bool) -> ProjectionBasis:
    """Fill missing tangent directions with canonical vectors orthogonal to
    what is already fixed."""
    fixed = [u0] + ([e1] if e1 is not None else [])
    found = []
    for i in range(len(u0)):
        cand = np.zeros(len(u0))
        cand[i] = 1.0
        ortho = _orthonormalize(cand, fixed + found)
        if ortho is not None:
            found.append(ortho)
        if len(fixed) + len(found) >= 3:
            break
    dirs = fixed + found
    return ProjectionBasis(u0 * np.linalg.norm(u0), u0, dirs[1], dirs[2],
                           degenerate=degenerate)


def tangent_projection(K, basis: ProjectionBasis) -> TangentCoords:
    diff = _vec(K) - basis.c0
    z = float(diff @ basis.u0)
    a = float(diff @ basis.e1)
    q = float(diff @ basis.e2)
    resid = diff - z * basis.u0 - a * basis.e1 - q * basis.e2
    return TangentCoords(z, a, q, float(np.linalg.norm(resid)))


def projected_and_full_distance(Ki, Kj, basis: ProjectionBasis) -> tuple[float, float]:
    diff = _vec(Ki) - _vec(Kj)
    d = float(np.linalg.norm(diff))
    d_proj = float(np.sqrt((diff @ basis.u0) ** 2 + (diff @ basis.e1) ** 2
                           + (diff @ basis.e2) ** 2))
    return d_proj, d


def branch_dispersion(Ks: list) -> float:
    """Mean squared pairwise distance over ordered branch pairs."""
    mats = np.array([_vec(k) for k in Ks])
    n = len(mats)
    if n < 2:
        raise ContractError("branch dispersion needs at least 2 vectors")
    sq = (mats ** 2).sum(axis=1)
    total = 2.0 * (n * sq.sum() - np.linalg.norm(mats.sum(axis=0)) ** 2)
    return float(max(total, 0.0) / (n * (n - 1)))


def block_projection_energy_mc(v, m: int, L: int, trials: int, seed: int,
                               layers: int = 2, d_model: int = 32,
                               contiguous: bool = False) -> tuple[float, float]:
    """Monte-Carlo estimate of E[||P_B v||^2 / ||v||^2] over random size-m
    position blocks.  Uniform subsets give exactly m/L in expectation;
    contiguous windows are reported as a separate empirical mode."""
    vec = _vec(v)
    if not 1 <= m <= L:
        raise ContractError(f"block size {m} outside [1, {L}]")
    energy = kv_position_energy(vec, layers, L, d_model)
    total = energy.sum()
    if total <= 0.0:
        raise ContractError("energy fraction undefined for a zero vector")
    rng = np.random.Generator(np.random.Philox(key=seed))
    if contiguous:
        starts = rng.integers(0, L - m + 1, size=trials)
        cumulative = np.concatenate([[0.0], np.cumsum(energy)])
        fractions = (cumulative[starts + m] - cumulative[starts]) / total
    else:
        if m == L:
            fractions = np.ones(trials)
        else:
            picks = rng.random((trials, L)).argpartition(m, axis=1)[:, :m]
            fractions = energy[picks].sum(axis=1) / total
    mean = float(fractions.mean())
    se = float(fractions.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return mean, se


def block_projection_norm_mc(v, m: int, L: int, trials: int, seed: int,
                             layers: int = 2, d_model: int = 32,
                             contiguous: bool = False) -> tuple[float, float]:
    """Monte-Carlo mean of ||P_B v|| / ||v|| (not squared).  By Jensen this
    sits at or below sqrt(m/L)."""
    vec = _vec(v)
    if not 1 <= m <= L:
        raise ContractError(f"block size {m} outside [1, {L}]")
    energy = kv_position_energy(vec, layers, L, d_model)
    total = energy.sum()
    if total <= 0.0:
        raise ContractError("norm fraction undefined for a zero vector")
    rng = np.random.Generator(np.random.Philox(key=seed))
    if contiguous:
        starts = rng.integers(0, L - m + 1, size=trials)
        cumulative = np.concatenate([[0.0], np.cumsum(energy)])
        fractions = (cumulative[starts + m] - cumulative[starts]) / total
    elif m == L:
        fractions = np.ones(trials)
    else:
        picks = rng.random((trials, L)).argpartition(m, axis=1)[:, :m]
        fractions = energy[picks].sum(axis=1) / total
    norms = np.sqrt(fractions)
    mean = float(norms.mean())
    se = float(norms.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return mean, se


def _tight_affine_fit(pairs: list[tuple[float, float]],
                      slope_floor: float, slope_cap: float | None) -> tuple[float, float]:
    """Least-squares slope, clipped to the admissible range, with the
    intercept lifted to the smallest value dominating every observed pair."""
    if not pairs:
        return slope_floor, 0.0
    x = np.array([p[0] for p in pairs])
    y = np.array([p[1] for p in pairs])
    if len(pairs) >= 2 and x.std() > 0:
        slope = float(np.polyfit(x, y, 1)[0])
    else:
        slope = slope_floor
    slope = max(slope, slope_floor)
    if slope_cap is not None:
        slope = min(slope, slope_cap)
    intercept = float(max(0.0, (y - slope * x).max()))
    return slope, intercept


def estimate_recurrence_params(block_pairs: list[tuple[float, float]],
                               refresh_pairs: list[tuple[float, float]],
                               R: int) -> RefreshRecurrenceParams:
    """Fit the tightest non-negative constants satisfying
    E_after <= (1+lambda) E_before + eps_B over block steps and
    E_after <= beta E_before + eps_F over refresh steps."""
    if not refresh_pairs:
        raise InsufficientDataError("no refresh events in the trace")
    a_b, eps_B = _tight_affine_fit(block_pairs, slope_floor=1.0, slope_cap=None)
    beta, eps_F = _tight_affine_fit(refresh_pairs, slope_floor=0.0,
                                    slope_cap=np.nextafter(1.0, 0.0))
    return RefreshRecurrenceParams(lambda_b=a_b - 1.0, beta=beta,
                                   eps_B=eps_B, eps_F=eps_F, R=R)


def verify_refresh_bound(params: RefreshRecurrenceParams,
                         Y: list[float], tol: float = 1e-9) -> dict:
    """Check Y_n <= rho^n Y_0 + c (1-rho^n)/(1-rho) for every boundary error."""
    if not len(Y):
        raise ContractError("no refresh-boundary errors supplied")
    rho, c = params.rho, params.c
    report = {"rho": rho, "c": c, "applicable": rho < 1.0,
              "bound_sequence": [], "violations": [], "limsup_bound": None}
    if rho >= 1.0:
        return report
    y0 = Y[0]
    for n, y in enumerate(Y):
        if rho == 0.0:
            bound = y0 if n == 0 else c
        else:
            bound = rho ** n * y0 + c * (1.0 - rho ** n) / (1.0 - rho)
        report["bound_sequence"].append(bound)
        if y > bound + tol:
            report["violations"].append({"n": n, "Y": y, "bound": bound})
    report["limsup_bound"] = c / (1.0 - rho)
    return report


def within_cycle_bound_check(params: RefreshRecurrenceParams,
                             E_seq: list[float], Y_n: float,
                             tol: float = 1e-9) -> dict:
    """Check E_{t_n + r} <= a^r Y_n + eps_B sum_{i<r} a^i inside one cycle.
    E_seq[0] must equal Y_n (the boundary error)."""
    a, eps = params.a_b, params.eps_B
    report = {"violations": [], "bounds": []}
    for r, e in enumerate(E_seq):
        bound = a ** r * Y_n + eps * sum(a ** i for i in range(r))
        report["bounds"].append(bound)
        if e > bound + tol:
            report["violations"].append({"r": r, "E": e, "bound": bound})
    return report


# ---- trace extraction ----------------------------------------------------

def consistency_records(records: list[dict]) -> list[dict]:
    """Events carrying logged consistency errors, in trace order."""
    out = []
    for rec in records:
        extra = rec.get("extra", {})
        if "E_before" in extra and "E_after" in extra:
            out.append({"step": rec["step"], "kind": rec["kind"],
                        "E_before": {int(k): v for k, v in extra["E_before"].items()},
                        "E_after": {int(k): v for k, v in extra["E_after"].items()}})
    return out


def branch_cycle_sequences(records: list[dict], branch: int) -> dict:
    """Chained per-cycle consistency errors for one branch.

    A cycle runs from one refresh boundary to the next.  The chained sequence
    starts at the boundary error (zero for exact refreshes) and then records
    the error seen just before each subsequent forward, so drift from merges
    and syncs between forwards is folded into the block-step pairs.
    """
    events = consistency_records(records)
    boundaries: list[float] = []
    cycles: list[list[float]] = []
    current: list[float] | None = None
    init_seen = False
    for ev in events:
        if branch not in ev["E_before"]:
            continue
        if current is not None:
            current.append(ev["E_before"][branch])
        if ev["kind"] == "refresh":
            if current is not None:
                cycles.append(current)
            boundary = ev["E_after"][branch]
            boundaries.append(boundary)
            current = [boundary]
            init_seen = True
    if not init_seen:
        raise InsufficientDataError(f"branch {branch} has no refresh events")
    return {"boundaries": boundaries, "cycles": cycles}


def recurrence_pairs(records: list[dict], branch: int) -> dict:
    """Block and refresh (E_before, E_after) pairs from chained cycles."""
    seqs = branch_cycle_sequences(records, branch)
    block_pairs = []
    refresh_pairs = []
    for j, cycle in enumerate(seqs["cycles"]):
        # cycle = [Y_j, E before 2nd forward, ..., E before the closing refresh]
        for i in range(len(cycle) - 1):
            block_pairs.append((cycle[i], cycle[i + 1]))
        refresh_pairs.append((cycle[-1], seqs["boundaries"][j + 1]))
    if not refresh_pairs:
        refresh_pairs = [(b, b) for b in seqs["boundaries"]]
    return {"block_pairs": block_pairs, "refresh_pairs": refresh_pairs,
            "boundaries": seqs["boundaries"], "cycles": seqs["cycles"]}


def kv_vectors_from_trace(records: list[dict]) -> list[KvVector]:
    """Full KV dumps logged in a trace (requires full-kv trace level)."""
    out = []
    for rec in records:
        kv = rec.get("extra", {}).get("kv")
        if not kv:
            continue
        for branch, data in kv.items():
            out.append(KvVector(np.array(data),
                                (int(branch), rec["step"], rec["kind"])))
    if not out:
        raise InsufficientDataError("trace carries no full KV dumps")
    return out


def block_vs_refresh_drift(records: list[dict]) -> dict:
    """Mean logged cache-delta norms split by event kind (Prop.-1-style
    qualitative comparison).  Skipped when refreshes produce no drift."""
    block, refresh = [], []
    for rec in records:
        deltas = rec.get("extra", {}).get("kv_delta")
        if not deltas:
            continue
        bucket = block if rec["kind"] == "block_forward" else (
            refresh if rec["kind"] == "refresh" else None)
        if bucket is not None:
            bucket.extend(float(v) for v in deltas.values())
    if not block or not refresh:
        raise InsufficientDataError("trace lacks kv delta norms for both kinds")
    mean_block = float(np.mean(block))
    mean_refresh = float(np.mean(refresh))
    skipped = mean_refresh <= 1e-12
    return {"mean_block_delta": mean_block, "mean_refresh_delta": mean_refresh,
            "skipped": skipped,
            "refresh_dominates": (None if skipped else mean_refresh > mean_block)}


def tangent_trajectory(records: list[dict],
                       basis: ProjectionBasis | None = None) -> list[dict]:
    """Per-event tangent coordinates for plotting: rows of
    (step, branch, kind, z, a, q, h_norm)."""
    vectors = kv_vectors_from_trace(records)
    if basis is None:
        anchor = next(v for v in vectors if v.provenance[2] == "init")
        basis = fit_basis(anchor, vectors)
    rows = []
    for v in vectors:
        coords = tangent_projection(v, basis)
        branch, step, kind = v.provenance
        rows.append({"step": step, "branch": branch, "kind": kind,
                     "z": coords.z, "a": coords.a, "q": coords.q,
                     "h_norm": coords.h_norm})
    return rows
