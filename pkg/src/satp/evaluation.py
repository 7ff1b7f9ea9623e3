"""Self-awareness evaluation: cutoff curves, AUCOC, SAS, stratified reports,
parameter accounting, and per-frame timing.

A cutoff curve removes test samples in descending order of their diagnostic
value and tracks the mean true error of whatever remains.  Only the ordering
of the diagnostics matters, so any strictly increasing transform of them
leaves every number here unchanged.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .data import AgentType
from .optim import ParameterSet


@dataclass
class ScoredSample:
    """One agent in one window, with true errors and diagnostic values."""

    record_id: str
    start_frame: int
    track_id: str
    agent_type: AgentType
    step_errors: np.ndarray  # (fut_len,) true per-step distance errors
    ade: float
    fde: float
    diag_ade: float
    diag_fde: float
    step_diags: np.ndarray | None = None  # (fut_len,) distance-form estimates
    hard: bool = False


@dataclass
class CutoffCurve:
    fractions: np.ndarray
    remaining_mean: np.ndarray


def default_grid(step: float = 0.05, stop: float = 0.95) -> np.ndarray:
    count = int(math.floor(stop / step + 0.5)) + 1
    return np.arange(count) * step


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _validate_grid(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if len(grid) < 2 or grid[0] != 0.0 or (np.diff(grid) <= 0).any():
        raise ValueError("grid must start at 0 and be strictly increasing with >= 2 points")
    return grid


def cutoff_curve(errors, diagnostics, grid) -> CutoffCurve:
    """Remove round(f*N) samples in descending diagnostic order per fraction f.

    Ties are broken by original index, so the curve is deterministic and
    invariant under any strictly increasing relabeling of the diagnostics.
    """
    errors = np.asarray(errors, dtype=np.float64)
    diagnostics = np.asarray(diagnostics, dtype=np.float64)
    if errors.shape != diagnostics.shape or errors.ndim != 1:
        raise ValueError(f"cutoff_curve: errors {errors.shape} vs diagnostics {diagnostics.shape}")
    n = len(errors)
    if n < 2:
        raise ValueError("cutoff_curve: need at least 2 samples")
    grid = _validate_grid(grid)
    order = np.argsort(-diagnostics, kind="stable")
    sorted_errors = errors[order]
    suffix = np.concatenate([np.cumsum(sorted_errors[::-1])[::-1], [0.0]])
    means = []
    for f in grid:
        removed = _round_half_up(f * n)
        if removed >= n:
            raise ValueError(f"cutoff_curve: fraction {f} removes every sample")
        means.append(suffix[removed] / (n - removed))
    return CutoffCurve(fractions=grid, remaining_mean=np.asarray(means))


def aucoc(curve: CutoffCurve) -> float:
    """Trapezoidal area under the cutoff curve."""
    if len(curve.fractions) < 2:
        raise ValueError("aucoc: need at least 2 curve points")
    return float(np.trapezoid(curve.remaining_mean, curve.fractions))


def aucoc_random(errors, grid) -> float:
    """Exact expected area under random removal: flat at the global mean."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("aucoc_random: empty errors")
    grid = _validate_grid(grid)
    return float(errors.mean() * (grid[-1] - grid[0]))


def aucoc_optimal(errors, grid) -> float:
    """Area when the true error itself is used as the diagnostic."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("aucoc_optimal: empty errors")
    return aucoc(cutoff_curve(errors, errors, grid))


def sas(errors, diagnostics, grid) -> float | None:
    """Self-awareness score; None when random and optimal areas coincide."""
    random_area = aucoc_random(errors, grid)
    optimal_area = aucoc_optimal(errors, grid)
    denom = random_area - optimal_area
    if denom <= 1e-15 * max(1.0, abs(random_area)):
        return None
    diag_area = aucoc(cutoff_curve(errors, diagnostics, grid))
    return (random_area - diag_area) / denom


def per_moment_report(scored: list[ScoredSample], grid) -> list[dict]:
    """One row per future moment: z(t) as error, estimated z(t) as diagnostic."""
    if not scored:
        return []
    if any(s.step_diags is None for s in scored):
        raise ValueError("per_moment_report: requires distance-form per-step diagnostics")
    fut_len = len(scored[0].step_errors)
    rows = []
    for t in range(fut_len):
        errs = np.array([s.step_errors[t] for s in scored])
        diags = np.array([s.step_diags[t] for s in scored])
        rows.append({
            "moment": t + 1,
            "aucoc_random": aucoc_random(errs, grid),
            "aucoc": aucoc(cutoff_curve(errs, diags, grid)),
            "aucoc_optimal": aucoc_optimal(errs, grid),
            "sas": sas(errs, diags, grid),
        })
    return rows


def _stratum_sas(errors: np.ndarray, diagnostics: np.ndarray, grid) -> float | None:
    try:
        return sas(errors, diagnostics, grid)
    except ValueError:  # stratum too small for the grid's largest fraction
        return None


def per_type_report(scored: list[ScoredSample], grid) -> dict[str, dict]:
    """SAS for ADE and FDE within each agent-type stratum; None when undefined."""
    report: dict[str, dict] = {}
    for agent_type in AgentType:
        members = [s for s in scored if s.agent_type is agent_type]
        row = {"count": len(members), "sas_ade": None, "sas_fde": None}
        if len(members) >= 2:
            ades = np.array([s.ade for s in members])
            fdes = np.array([s.fde for s in members])
            row["sas_ade"] = _stratum_sas(ades, np.array([s.diag_ade for s in members]), grid)
            row["sas_fde"] = _stratum_sas(fdes, np.array([s.diag_fde for s in members]), grid)
        report[agent_type.value] = row
    return report


def count_parameters(*param_sets: ParameterSet) -> int:
    """Total learnable elements; ensembles pass every member's set."""
    return sum(ps.count() for ps in param_sets)


def time_per_frame(frame_fn, frames: int = 100, warmup: int = 10) -> float:
    """Median wall-clock milliseconds per full-scene frame."""
    if frames < 100 or warmup < 10:
        raise ValueError("time_per_frame: need >= 100 measured frames after >= 10 warmup frames")
    for _ in range(warmup):
        frame_fn()
    durations = []
    for _ in range(frames):
        start = time.perf_counter()
        frame_fn()
        durations.append((time.perf_counter() - start) * 1000.0)
    return statistics.median(durations)
