from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satp.data import AgentType
from satp.evaluation import (
    ScoredSample,
    aucoc,
    aucoc_optimal,
    aucoc_random,
    count_parameters,
    cutoff_curve,
    default_grid,
    per_moment_report,
    per_type_report,
    sas,
    time_per_frame,
)
from satp.optim import ParameterSet
from satp.rng import Rng

GRID4 = np.array([0.0, 0.25, 0.5, 0.75])
ERRORS = [4.0, 1.0, 3.0, 2.0]
DIAGS = [10.0, 0.0, 5.0, 1.0]


def test_hand_derived_curve() -> None:
    curve = cutoff_curve(ERRORS, DIAGS, GRID4)
    assert curve.remaining_mean.tolist() == [2.5, 2.0, 1.5, 1.0]


def test_hand_derived_aucoc_and_sas() -> None:
    assert aucoc(cutoff_curve(ERRORS, DIAGS, GRID4)) == pytest.approx(1.3125, abs=1e-12)
    assert aucoc_random(ERRORS, GRID4) == pytest.approx(1.875, abs=1e-12)
    assert sas(ERRORS, DIAGS, GRID4) == pytest.approx(1.0, abs=1e-12)


def test_tie_rule_uses_original_order() -> None:
    curve = cutoff_curve([5.0, 1.0, 3.0], [2.0, 2.0, 2.0], np.array([0.0, 1 / 3, 2 / 3]))
    assert curve.remaining_mean.tolist() == [3.0, 2.0, 3.0]


def test_first_point_is_global_mean() -> None:
    rng = Rng(0)
    errors = np.abs(rng.normal(size=(40,)))
    diags = rng.normal(size=(40,))
    curve = cutoff_curve(errors, diags, default_grid())
    assert curve.remaining_mean[0] == pytest.approx(errors.mean())


def test_cutoff_input_validation() -> None:
    with pytest.raises(ValueError):
        cutoff_curve([1.0], [1.0], GRID4)
    with pytest.raises(ValueError):
        cutoff_curve([1.0, 2.0], [1.0], GRID4)
    with pytest.raises(ValueError):
        cutoff_curve([1.0, 2.0], [1.0, 2.0], np.array([0.0, 1.0]))  # empties the set


def test_aucoc_flat_and_triangle() -> None:
    from satp.evaluation import CutoffCurve

    flat = CutoffCurve(fractions=np.array([0.0, 0.5]), remaining_mean=np.array([3.0, 3.0]))
    assert aucoc(flat) == pytest.approx(1.5)
    tri = CutoffCurve(fractions=np.array([0.0, 1.0]), remaining_mean=np.array([1.0, 0.0]))
    assert aucoc(tri) == pytest.approx(0.5)


def test_aucoc_random_matches_flat_mean() -> None:
    grid = np.array([0.0, 0.25, 0.5])
    assert aucoc_random([1.0, 2.0, 3.0], grid) == pytest.approx(1.0)


def test_aucoc_random_matches_monte_carlo() -> None:
    rng = np.random.default_rng(0)
    errors = np.abs(rng.normal(size=500)) ** 2
    grid = default_grid()
    n = len(errors)
    removed = np.array([int(np.floor(f * n + 0.5)) for f in grid])
    draws = 10000
    curves = np.empty((draws, len(grid)))
    for d in range(draws):
        perm = rng.permutation(errors)
        suffix = np.concatenate([np.cumsum(perm[::-1])[::-1], [0.0]])
        curves[d] = suffix[removed] / (n - removed)
    mc = curves.mean(axis=0)
    analytic = np.full(len(grid), errors.mean())
    assert np.abs(mc - analytic).max() / errors.mean() < 0.01
    assert aucoc_random(errors, grid) == pytest.approx(np.trapezoid(analytic, grid))


def test_optimal_examples_and_bound() -> None:
    assert aucoc_optimal(ERRORS, GRID4) == pytest.approx(1.3125, abs=1e-12)
    # all-equal errors: optimal equals random
    assert aucoc_optimal([2.0, 2.0, 2.0, 2.0], GRID4) == pytest.approx(
        aucoc_random([2.0, 2.0, 2.0, 2.0], GRID4))


def test_sas_oracle_anticorrelated_and_undefined() -> None:
    errors = np.abs(Rng(1).normal(size=(100,)))
    grid = default_grid()
    assert sas(errors, errors, grid) == pytest.approx(1.0, abs=1e-12)
    assert sas(errors, -errors, grid) < 0.0
    assert sas([2.0, 2.0, 2.0, 2.0], [1.0, 2.0, 3.0, 4.0], GRID4) is None


def test_monotone_transform_invariance_bit_identical() -> None:
    rng = Rng(2)
    errors = np.abs(rng.normal(size=(60,)))
    diags = rng.normal(size=(60,))
    grid = default_grid()
    base_curve = cutoff_curve(errors, diags, grid)
    base_sas = sas(errors, diags, grid)
    for transform in (np.exp, lambda x: 3.0 * x + 7.0):
        curve = cutoff_curve(errors, transform(diags), grid)
        assert (curve.remaining_mean == base_curve.remaining_mean).all()
        assert sas(errors, transform(diags), grid) == base_sas


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(min_value=0.0, max_value=100.0), min_size=12, max_size=40))
def test_optimal_curve_is_non_increasing(errors) -> None:
    errors = np.asarray(errors)
    curve = cutoff_curve(errors, errors, default_grid())
    assert (np.diff(curve.remaining_mean) <= 1e-12).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_optimal_lower_bounds_any_diagnostic(seed) -> None:
    rng = Rng(seed)
    errors = np.abs(rng.normal(size=(30,)))
    diags = rng.normal(size=(30,))
    grid = default_grid()
    assert aucoc_optimal(errors, grid) <= aucoc(cutoff_curve(errors, diags, grid)) + 1e-12


def _scored(n: int, seed: int = 0, oracle: bool = False) -> list[ScoredSample]:
    rng = Rng(seed)
    out = []
    types = list(AgentType)
    for i in range(n):
        step_errors = np.abs(rng.normal(size=(6,))) + 0.01 * i
        ade, fde = step_errors.mean(), step_errors[-1]
        diag_step = step_errors if oracle else np.abs(rng.normal(size=(6,)))
        out.append(ScoredSample(
            record_id="r", start_frame=i, track_id=f"t{i}", agent_type=types[i % 4],
            step_errors=step_errors, ade=float(ade), fde=float(fde),
            diag_ade=float(diag_step.mean()), diag_fde=float(diag_step[-1]),
            step_diags=diag_step))
    return out


def test_per_moment_report_shape_and_oracle() -> None:
    rows = per_moment_report(_scored(50, oracle=True), default_grid())
    assert [r["moment"] for r in rows] == [1, 2, 3, 4, 5, 6]
    for row in rows:
        assert row["sas"] == pytest.approx(1.0, abs=1e-12)
        assert set(row) == {"moment", "aucoc_random", "aucoc", "aucoc_optimal", "sas"}


def test_per_moment_requires_step_diags() -> None:
    scored = _scored(10)
    scored[0].step_diags = None
    with pytest.raises(ValueError):
        per_moment_report(scored, default_grid())


def test_per_type_report_covers_all_strata_and_counts() -> None:
    scored = _scored(80)
    report = per_type_report(scored, default_grid())
    assert list(report) == [t.value for t in AgentType]
    assert sum(row["count"] for row in report.values()) == len(scored)


def test_per_type_missing_stratum_is_undefined() -> None:
    scored = [s for s in _scored(80) if s.agent_type is not AgentType.PEDESTRIAN]
    report = per_type_report(scored, default_grid())
    assert report[AgentType.PEDESTRIAN.value]["count"] == 0
    assert report[AgentType.PEDESTRIAN.value]["sas_ade"] is None


def test_per_type_oracle_sas_one() -> None:
    report = per_type_report(_scored(80, oracle=True), default_grid())
    for row in report.values():
        assert row["sas_ade"] == pytest.approx(1.0, abs=1e-12)


def test_count_parameters_dense_example() -> None:
    ps = ParameterSet()
    ps.add("l1.w", np.zeros((8, 4)))
    ps.add("l1.b", np.zeros(8))
    ps.add("l2.w", np.zeros((2, 8)))
    ps.add("l2.b", np.zeros(2))
    assert count_parameters(ps) == 58
    frozen = ParameterSet()
    frozen.add("w", np.zeros((3, 3)))
    frozen.freeze()
    assert count_parameters(frozen) == 9  # freezing removes nothing


def test_time_per_frame_validation_and_positive() -> None:
    with pytest.raises(ValueError):
        time_per_frame(lambda: None, frames=10, warmup=10)
    with pytest.raises(ValueError):
        time_per_frame(lambda: None, frames=100, warmup=2)
    ms = time_per_frame(lambda: sum(range(200)), frames=100, warmup=10)
    assert ms >= 0.0
