import math
import sys
from pathlib import Path

import numpy as np
import pytest

from rankone import analysis as an, dynamics
from rankone.construction import ConstructionParams, Family, build_stages
from rankone.errors import DegenerateDictionary, ParameterError
from rankone.levels import StageTime

sys.path.insert(0, str(Path(__file__).parent))
from oracles import OdometerCellOracle  # noqa: E402


@pytest.fixture(scope="module")
def feps():
    return build_stages(ConstructionParams(Family.FEPS, eps=0.5, max_stage=40))


@pytest.fixture(scope="module")
def basis(feps):
    return an.TestBasis.equal_slabs(feps, 8, 3)


@pytest.fixture(scope="module")
def odo():
    return build_stages(ConstructionParams(Family.ODOMETER, max_stage=6))


def test_correlation_at_zero(feps):
    A = dynamics.TowerSet.from_strips(feps, 2, [(0.1, 0.6, 0.2, 1.1)])
    B = dynamics.TowerSet.from_strips(feps, 2, [(0.3, 0.9, 0.5, 1.4)])
    r = an.correlation(feps, A, B, 0.0)
    assert r.value == pytest.approx(dynamics.intersect_measure(A, B), abs=1e-15)
    assert r.tail_bound == 0.0


def test_full_tower_invariance(odo):
    full = dynamics.slab_set(odo, 6, 0.0, odo.heights[6])
    for t in [0.0, 1.3, 7.0]:
        r = an.correlation(odo, full, full, t)
        # the whole space is invariant; only the declared tail may be missing
        assert abs(r.value - dynamics.measure(full)) <= r.tail_bound + 1e-12


def test_odometer_base_slab_example(odo):
    oracle = OdometerCellOracle(6, 128)
    A = dynamics.TowerSet.from_strips(odo, 1, [(0, 1, 0, 0.5)])
    r = an.correlation(odo, A, A, 2.0)
    value, cell_bound = oracle.correlation(oracle.cells(0, 1, 0, 0.5), oracle.cells(0, 1, 0, 0.5), 2.0)
    assert abs(r.value - value) <= cell_bound + r.tail_bound + 1e-12


def test_matrix_at_zero_is_diagonal(feps, basis):
    M = an.correlation_matrix(feps, basis, 0.0)
    assert np.allclose(M, np.diag(basis.measures), atol=1e-15)


def test_matrix_entry_bounds_and_symmetry(feps, basis):
    for t in [0.8, 5.5, StageTime(20, 1, 0.3)]:
        M = an.correlation_matrix(feps, basis, t)
        cap = np.minimum.outer(basis.measures, basis.measures)
        assert np.all(M >= -1e-15) and np.all(M <= cap + 1e-15)
        Mneg = an.correlation_matrix(feps, basis, -t if not isinstance(t, StageTime) else -t)
        assert np.allclose(M, Mneg.T, atol=1e-9)


def test_partition_row_sums(odo):
    # slabs of the deepest stage partition the whole odometer space
    basis = an.TestBasis.equal_slabs(odo, 8, 6)
    series = an.correlation_matrices(odo, basis, [0.0, 1.5, 3.25])
    for M, bound in zip(series.matrices, series.bounds):
        assert np.all(np.abs(M.sum(axis=1) - basis.measures) <= bound + 1e-9)
    assert np.allclose(series.matrices[0].sum(axis=1), basis.measures, atol=1e-12)


def test_time_average_is_limit_of_midpoint_rule(feps, basis):
    exact = basis.average_matrix(1.0)
    errors = [np.abs(basis.average_matrix(1.0, points=p) - exact).max() for p in (64, 256, 4096)]
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-8
    # halving the midpoint step near convergence moves entries by far less than 1e-6
    assert np.abs(basis.average_matrix(1.0, points=2048) - basis.average_matrix(1.0, points=4096)).max() < 1e-6


def test_fit_exact_members(feps, basis):
    M = 0.5 * basis.theta + 0.5 * basis.identity
    fit = an.fit_weak_limit(M, basis)
    assert (fit.alpha, fit.beta) == (pytest.approx(0.5, abs=1e-10), pytest.approx(0.5, abs=1e-10))
    assert fit.residual <= 1e-10
    fit = an.fit_weak_limit(basis.identity, basis)
    assert abs(fit.alpha) <= 1e-10 and abs(fit.beta - 1) <= 1e-10 and fit.residual <= 1e-10
    M = 0.3 * basis.theta + 0.7 * basis.average_matrix(2.0)
    fit = an.fit_weak_limit(M, basis, ("Theta", "Avg"), a=2.0)
    assert fit.gamma == pytest.approx(0.7, abs=1e-10) and fit.residual <= 1e-10
    assert math.isnan(fit.beta)


def test_fit_degenerate_dictionary(feps):
    one = an.TestBasis.equal_slabs(feps, 1, 3)
    with pytest.raises(DegenerateDictionary):
        an.fit_weak_limit(one.identity, one)


def test_fit_rejects_bad_input(feps, basis):
    with pytest.raises(ParameterError):
        an.fit_weak_limit(basis.identity, basis, ("Theta", "Foo"))
    with pytest.raises(ParameterError):
        an.fit_weak_limit(basis.identity, basis, ("Theta", "Avg"))
    with pytest.raises(ParameterError):
        an.fit_weak_limit(np.eye(3), basis)


def test_scan_window_containing_zero(feps, basis):
    scan = an.scan_lemma_times(feps, basis, 1.0, [an.TimeWindow(0.0, 0.5)], step=0.25)
    assert scan.best_pair.t == 0.0
    assert scan.best_pair.pair.residual <= 1e-10
    assert abs(scan.best_pair.pair.alpha) <= 1e-10 and abs(scan.best_pair.pair.beta - 1) <= 1e-10


def test_scan_rejects_empty_windows(feps, basis):
    with pytest.raises(ParameterError):
        an.scan_lemma_times(feps, basis, 1.0, [])


def test_scan_matches_single_times(feps, basis):
    w = an.TimeWindow(StageTime(30, 2, 0.0), 0.5)
    scan = an.scan_lemma_times(feps, basis, 1.0, [w], step=0.25)
    for row in scan.rows:
        M = an.correlation_matrix(feps, basis, row.t)
        assert an.fit_weak_limit(M, basis).residual == pytest.approx(row.pair.residual, abs=1e-9)


def test_scan_worker_count_does_not_matter(feps, basis):
    ws = [an.TimeWindow(StageTime(20, k, 0.0), 0.5) for k in (1, 2, 3)]
    one = an.scan_lemma_times(feps, basis, 1.0, ws, step=0.25, workers=1)
    three = an.scan_lemma_times(feps, basis, 1.0, ws, step=0.25, workers=3)
    assert [r.t for r in one.rows] == [r.t for r in three.rows]
    assert [r.integral.residual for r in one.rows] == [r.integral.residual for r in three.rows]


def test_odometer_integral_family_does_not_win():
    stages = build_stages(ConstructionParams(Family.ODOMETER, max_stage=40))
    basis = an.TestBasis.equal_slabs(stages, 8, 3)
    for j in (20, 30, 35):
        M = an.correlation_matrix(stages, basis, StageTime(j))
        pair = an.fit_weak_limit(M, basis)
        integral = an.fit_weak_limit(M, basis, ("Theta", "Avg"), a=1.0)
        assert integral.residual >= pair.residual - 1e-6


def test_decay_profile(feps, basis):
    prof = an.mixing_decay_profile(feps, basis, [0.0, StageTime(10), StageTime(41)])
    expected = np.max(np.abs(basis.identity - basis.theta))
    assert prof[0].deviation == pytest.approx(expected)
    assert prof[0].deviation > 0
    assert not prof[1].exhausted
    assert prof[2].exhausted and math.isnan(prof[2].deviation)


def test_default_windows(feps):
    ws = an.default_lemma_windows(feps, 1.0, j=36)
    assert len(ws) == math.ceil(math.sqrt(36) / 0.5)
    assert ws[0].center == StageTime(36, 1, 0.0) and ws[0].radius == 2.0
    assert len(ws[0].samples(1 / 32)) == 129
