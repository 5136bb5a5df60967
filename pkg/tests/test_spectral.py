import math
import sys
from pathlib import Path

import numpy as np
import pytest

from rankone import analysis as an, dynamics, spectral as sp
from rankone.construction import ConstructionParams, Family, build_stages
from rankone.errors import BasisDegeneracy, DegenerateInput, ParameterError
from rankone.levels import StageTime

sys.path.insert(0, str(Path(__file__).parent))
from oracles import (  # noqa: E402
    distinct_eigenvalue_count,
    symmetric_square_eigenvalues,
    tensor_square_eigenvalues,
)

PHASES = 2.0 * np.sqrt([2.0, 3.0, 5.0, 7.0, 11.0, 13.0])


@pytest.fixture(scope="module")
def feps():
    return build_stages(ConstructionParams(Family.FEPS, eps=0.5, max_stage=40))


@pytest.fixture(scope="module")
def basis(feps):
    return an.TestBasis.equal_slabs(feps, 8, 3)


@pytest.fixture(scope="module")
def odo():
    return build_stages(ConstructionParams(Family.ODOMETER, max_stage=40))


def _grid(T=400.0, dt=0.5):
    return np.arange(0.0, T + dt / 2, dt)


# autocorrelation


def test_autocorrelation_at_zero_is_norm(feps, basis):
    c = np.random.default_rng(1).standard_normal(len(basis))
    r = sp.autocorrelation(feps, basis, c, _grid(4.0, 0.25))
    assert r.values[0] == pytest.approx(c @ (basis.identity - basis.theta) @ c, abs=1e-14)
    assert not r.exhausted.any()


def test_autocorrelation_matches_matrices_and_is_even(feps, basis):
    c = np.random.default_rng(2).standard_normal(len(basis))
    r = sp.autocorrelation(feps, basis, c, _grid(6.0, 0.5))
    for t, v in zip(r.times, r.values):
        plus = c @ (an.correlation_matrix(feps, basis, t) - basis.theta) @ c
        minus = c @ (an.correlation_matrix(feps, basis, -t) - basis.theta) @ c
        assert v == pytest.approx(plus, abs=1e-12)
        assert minus == pytest.approx(plus, abs=1e-12)


def test_odometer_autocorrelation_recurs(odo):
    # base-slab indicator: pure point spectrum brings r(h_j) back to r(0)
    basis = an.TestBasis.from_sets([dynamics.slab_set(odo, 1, 0.0, 0.5)])
    r0 = (basis.identity - basis.theta)[0, 0]
    series = an.correlation_matrices(odo, basis, [StageTime(j) for j in (3, 6, 12, 24)])
    ratios = (series.matrices[:, 0, 0] - basis.theta[0, 0]) / r0
    # the unit-roof odometer moves full-width slabs onto themselves at integer times;
    # only orbits leaving the truncated hierarchy (the reported bound) are missing
    assert np.all(np.abs(ratios - 1.0) <= series.bounds / r0 + 1e-9)
    assert abs(ratios[0] - 1.0) <= 1e-9


def test_autocorrelation_marks_exhausted_times():
    small = build_stages(ConstructionParams(Family.FEPS, eps=0.5, max_stage=8))
    basis = an.TestBasis.equal_slabs(small, 4, 3)
    far = small.heights[8] * 3
    r = sp.autocorrelation(small, basis, np.ones(4), np.linspace(0.0, far, 5))
    assert r.exhausted[-1] and math.isnan(r.values[-1])
    assert not r.exhausted[0]


def test_autocorrelation_rejects_bad_input(feps, basis):
    with pytest.raises(ParameterError):
        sp.autocorrelation(feps, basis, np.ones(3), _grid(2.0))
    with pytest.raises(ParameterError):
        sp.autocorrelation(feps, basis, np.ones(len(basis)), [0.0, 0.5, 1.5])


# spectral_density


def test_cosine_peak_within_one_bin():
    t = _grid()
    est = sp.spectral_density(t, np.cos(2 * np.pi * 0.25 * t))
    assert abs(est.peak_frequency() - 0.25) <= est.bin_width
    assert est.integral() == pytest.approx(1.0, rel=0.02)
    assert np.all(est.density >= 0)


def test_gaussian_is_unimodal_at_zero():
    t = _grid(40.0, 0.05)
    est = sp.spectral_density(t, np.exp(-(t**2)))
    k = int(np.argmax(est.density))
    assert abs(est.freqs[k]) <= est.bin_width
    assert np.all(np.diff(est.density[k:]) <= 1e-12)
    assert np.all(np.diff(est.density[: k + 1]) >= -1e-12)
    # untapered, the estimate reproduces the exact density sqrt(pi) exp(-pi^2 f^2)
    raw = sp.spectral_density(t, np.exp(-(t**2)), window="none")
    assert np.allclose(raw.density, math.sqrt(math.pi) * np.exp(-((np.pi * raw.freqs) ** 2)), atol=1e-9)


def test_zero_in_zero_out():
    t = _grid(10.0)
    est = sp.spectral_density(t, np.zeros_like(t))
    assert np.all(est.density == 0) and est.clipped_mass == 0
    assert np.all(sp.convolution_density(t, np.zeros_like(t)).density == 0)


@pytest.mark.parametrize("window", sp.WINDOWS)
def test_density_is_linear(window):
    t = _grid(50.0)
    r1, r2 = np.exp(-t / 3), np.cos(0.7 * t) * np.exp(-t / 30)
    d = sp.spectral_density(t, 2 * r1 + 3 * r2, window=window, pad=1)
    raw = lambda r: sp.spectral_density(t, r, window=window, pad=1)
    # positive-definite inputs, so no clipping interferes
    assert d.clipped_mass < 1e-12 or window == "none"
    if window != "none":
        assert np.allclose(d.density, 2 * raw(r1).density + 3 * raw(r2).density, atol=1e-10)


def test_density_rescaling():
    t = _grid(50.0, 0.5)
    r = np.exp(-t / 4) * np.cos(t)
    a = sp.spectral_density(t, r)
    b = sp.spectral_density(3 * t, r)
    assert np.allclose(b.freqs * 3, a.freqs)
    assert np.allclose(b.density, 3 * a.density)
    assert b.integral() == pytest.approx(a.integral())


def test_density_grid_errors():
    t = _grid(10.0)
    with pytest.raises(ParameterError):
        sp.spectral_density(np.r_[t, t[-1] + 0.7], np.ones(len(t) + 1))
    with pytest.raises(ParameterError):
        sp.spectral_density(t + 1.0, np.ones(len(t)))
    with pytest.raises(ParameterError):
        sp.spectral_density(t, np.ones(len(t)), window="kaiser")
    bad = np.ones(len(t))
    bad[3] = np.nan
    with pytest.raises(ParameterError):
        sp.spectral_density(t, bad)


def test_convolution_peaks_and_mass():
    lam = 0.15
    t = _grid(600.0)
    r = 1.5 * np.cos(2 * np.pi * lam * t)
    est = sp.convolution_density(t, r)
    local = lambda f: est.density[np.abs(est.freqs - f) <= 2 * est.bin_width].max()
    between = est.density[np.abs(est.freqs - lam) <= 2 * est.bin_width].max()
    assert local(0.0) > 50 * between and local(2 * lam) > 50 * between
    assert est.integral() == pytest.approx(r[0] ** 2, rel=0.02)


# overlap


def test_overlap_endpoints_and_symmetry():
    t = _grid()
    a = sp.spectral_density(t, np.cos(2 * np.pi * 0.25 * t))
    b = sp.spectral_density(t, np.exp(-t / 50) * np.cos(2 * np.pi * 0.1 * t))
    assert sp.overlap_statistic(a, a) == pytest.approx(1.0, abs=1e-12)
    assert sp.overlap_statistic(a, b) == pytest.approx(sp.overlap_statistic(b, a), abs=1e-15)
    f = np.linspace(-1, 1, 201)
    left = sp.SpectralEstimate(f, (f < -0.5).astype(float), "none", 1, (0, 1), 0.0)
    right = sp.SpectralEstimate(f, (f > 0.5).astype(float), "none", 1, (0, 1), 0.0)
    assert sp.overlap_statistic(left, right) == 0.0
    scaled = sp.SpectralEstimate(f, 7.0 * left.density, "none", 1, (0, 1), 0.0)
    mixed = sp.SpectralEstimate(f, left.density + right.density, "none", 1, (0, 1), 0.0)
    assert sp.overlap_statistic(scaled, mixed) == pytest.approx(sp.overlap_statistic(left, mixed), abs=1e-15)


def test_overlap_resamples_grids():
    a = sp.spectral_density(_grid(100.0, 0.5), np.exp(-_grid(100.0, 0.5) / 5))
    b = sp.spectral_density(_grid(200.0, 0.25), np.exp(-_grid(200.0, 0.25) / 5))
    assert sp.overlap_statistic(a, b) > 0.95


def test_overlap_zero_mass():
    t = _grid(10.0)
    zero = sp.spectral_density(t, np.zeros_like(t))
    with pytest.raises(DegenerateInput):
        sp.overlap_statistic(zero, sp.spectral_density(t, np.exp(-t)))


# Koopman compression


def test_compression_identity_and_contraction(feps, basis):
    assert np.allclose(sp.koopman_compression(feps, basis, 0.0), np.eye(len(basis)), atol=1e-9)
    for t in (0.5, 3.7, StageTime(30), StageTime(20, 2, 0.4)):
        K = sp.koopman_compression(feps, basis, t)
        assert np.linalg.norm(K, 2) <= 1 + 1e-9


def test_compression_odometer_rigidity(odo):
    # seven of eight stage-3 slabs: the full set would make the centred indicators dependent
    sets = dynamics.equal_slabs(odo, 3, 8)[:7]
    basis = an.TestBasis.from_sets(sets)
    times = [StageTime(j) for j in (6, 12, 24)]
    mats, _ = sp.koopman_compressions(odo, basis, times)
    bounds = an.correlation_matrices(odo, basis, times).bounds
    # h_j is a multiple of h_3, so only the truncation loss separates K(h_j) from the identity
    gaps = np.abs(mats - np.eye(7)).max(axis=(1, 2))
    assert gaps[0] < 1e-9
    assert np.all(gaps <= 1e-9 + 7 * bounds * np.linalg.norm(sp._lowdin(basis), 2) ** 2)


def test_compression_degenerate_basis(odo):
    basis = an.TestBasis.equal_slabs(odo, 8, 3)
    with pytest.raises(BasisDegeneracy) as info:
        sp.koopman_compression(odo, basis, 1.0)
    assert info.value.condition_number > 1e10


# cyclic rank probe


@pytest.mark.parametrize("n", range(1, 7))
def test_probe_matches_diagonal_oracle(n):
    phases = PHASES[:n]
    D = np.diag(np.exp(1j * phases))
    full = sp.cyclic_rank_probe([D], "full_square", seed=n)
    sym = sp.cyclic_rank_probe([D], "sym_square", seed=n)
    assert full.rank == distinct_eigenvalue_count(tensor_square_eigenvalues(phases)) == n * (n + 1) // 2
    assert sym.rank == distinct_eigenvalue_count(symmetric_square_eigenvalues(phases)) == sym.dimension
    assert full.ratio == pytest.approx((n * (n + 1) / 2) / n**2)
    assert not full.inconclusive and not sym.inconclusive


def test_probe_commensurate_phases():
    # phases 0, 1, 2 (times a unit): sums repeat, so fewer distinct eigenvalues
    phases = np.array([0.0, 1.0, 2.0]) * 0.9
    D = np.diag(np.exp(1j * phases))
    res = sp.cyclic_rank_probe([D], "full_square")
    assert res.rank == distinct_eigenvalue_count(tensor_square_eigenvalues(phases)) == 5


@pytest.mark.parametrize("mode, dim", [("full_square", 9), ("sym_square", 6), ("base", 3)])
def test_probe_identity(mode, dim):
    res = sp.cyclic_rank_probe([np.eye(3)], mode)
    assert res.dimension == dim and res.rank == 1
    assert res.ratio == pytest.approx(1 / dim)


def test_probe_budget_and_errors():
    D = np.diag(np.exp(1j * PHASES[:4]))
    res = sp.cyclic_rank_probe([D], "full_square", budget=3)
    assert res.inconclusive and res.rank == 4
    with pytest.raises(ParameterError):
        sp.cyclic_rank_probe([D], "other")
    with pytest.raises(ParameterError):
        sp.cyclic_rank_probe([D, np.eye(3)])
    with pytest.raises(ParameterError):
        sp.cyclic_rank_probe([D], v=np.zeros(16))


def test_multiplicity_report(feps, basis):
    rep = sp.multiplicity_probe(feps, basis, seed=3)
    assert rep.basis_size == len(basis) and len(rep.times) == 9
    assert 0 < rep.sym_cyclic_ratio <= 1 and 0 < rep.full_cyclic_ratio <= 1
    assert rep.rank_tolerance == sp.DEFAULT_RANK_TOL
    again = sp.multiplicity_probe(feps, basis, seed=3)
    assert again.rows() == rep.rows()
