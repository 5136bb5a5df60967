"""Spectral estimates and multiplicity probes built on correlation matrices.

Everything here is a finite-dimensional proxy.  Densities come from tapered
Fourier transforms of sampled autocorrelations, and multiplicity is probed
by the dimension of cyclic subspaces of Kronecker squares of Koopman
compressions.  None of these numbers certify a spectral property of the
infinite-dimensional unitary group; they are signatures to compare across
constructions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import analysis
from .errors import BasisDegeneracy, DegenerateInput, DepthExhausted, ParameterError
from .levels import StageTime, as_time

__all__ = [
    "AutocorrelationSamples",
    "SpectralEstimate",
    "CyclicProbeResult",
    "MultiplicityProbeReport",
    "WINDOWS",
    "autocorrelation",
    "spectral_density",
    "convolution_density",
    "overlap_statistic",
    "koopman_compression",
    "koopman_compressions",
    "cyclic_rank_probe",
    "multiplicity_probe",
    "default_probe_times",
    "symmetric_embedding",
]

WINDOWS = ("none", "hann", "blackman")
DEFAULT_RANK_TOL = 1e-6
_GRAM_CONDITION_LIMIT = 1e10
_GRID_TOL = 1e-9


@dataclass(frozen=True)
class AutocorrelationSamples:
    """``r(t) = <U_t f, f>`` on a uniform grid of non-negative times.

    ``exhausted`` marks grid points out of reach (their value is NaN).
    """

    times: np.ndarray
    values: np.ndarray
    coefficients: np.ndarray
    bounds: np.ndarray
    exhausted: np.ndarray

    @property
    def step(self):
        return float(self.times[1] - self.times[0]) if len(self.times) > 1 else math.nan


@dataclass(frozen=True)
class SpectralEstimate:
    """Density of a symmetric spectral measure on ``[-nyquist, nyquist]``.

    Frequencies are in cycles per time unit.  ``clipped_mass`` is the
    (trapezoid) mass of negative FFT values that were set to zero.
    """

    freqs: np.ndarray
    density: np.ndarray
    window: str
    window_length: int
    source_span: tuple
    clipped_mass: float

    def integral(self):
        return float(np.trapezoid(self.density, self.freqs))

    @property
    def bin_width(self):
        return float(self.freqs[1] - self.freqs[0])

    def peak_frequency(self, positive=True):
        """Frequency of the largest density value (among ``f >= 0`` by default)."""
        sel = self.freqs >= 0 if positive else np.ones(len(self.freqs), dtype=bool)
        k = int(np.argmax(np.where(sel, self.density, -np.inf)))
        return float(self.freqs[k])


def autocorrelation(stages, basis, coefficients, grid) -> AutocorrelationSamples:
    """``r(t) = sum_ab c_a c_b (M(t)_ab - mu(E_a) mu(E_b))`` for ``f = sum_a c_a (1_{E_a} - mu(E_a))``.

    ``grid`` is a uniform grid of non-negative times starting at 0; ``r`` is
    even, so negative times carry no extra information.
    """
    c = np.asarray(coefficients, dtype=float)
    if c.shape != (len(basis),):
        raise ParameterError(f"coefficients: expected {len(basis)} values, got shape {c.shape}")
    times = _uniform_grid(grid)
    series = analysis.window_matrices(stages, basis, 0.0, times)
    centered = series.matrices - basis.theta[None, :, :]
    values = np.einsum("a,kab,b->k", c, centered, c)
    values[series.exhausted] = np.nan
    return AutocorrelationSamples(times, values, c, series.bounds * float(np.sum(np.abs(c))) ** 2, series.exhausted)


def _uniform_grid(grid):
    t = np.asarray(grid, dtype=float)
    if t.ndim != 1 or len(t) < 2:
        raise ParameterError("grid: expected at least two time points")
    if t[0] != 0.0:
        raise ParameterError("grid: must start at t = 0")
    d = np.diff(t)
    if d[0] <= 0 or np.abs(d - d[0]).max() > _GRID_TOL * max(1.0, abs(t[-1])):
        raise ParameterError("grid: time points must be uniformly spaced and increasing")
    return t


def _taper(name, n):
    # one-sided taper over lags 0..n-1, equal to 1 at lag 0
    key = str(name).strip().lower()
    if key not in WINDOWS:
        raise ParameterError(f"window: expected one of {', '.join(WINDOWS)}, got {name!r}")
    x = np.arange(n) / n
    if key == "none":
        return np.ones(n)
    if key == "hann":
        return 0.5 * (1.0 + np.cos(np.pi * x))
    return 0.42 + 0.5 * np.cos(np.pi * x) + 0.08 * np.cos(2.0 * np.pi * x)


def spectral_density(times, values, window="blackman", pad=4) -> SpectralEstimate:
    """Tapered Fourier transform of an even autocorrelation sampled at ``times >= 0``.

    The samples are extended evenly to ``[-T, T]``, multiplied by the taper,
    zero padded by ``pad`` and transformed with the FFT.  The density
    integrates to ``r(0)`` up to the clipped negative values.  The default
    Blackman taper has a nearly non-negative spectral window (clipping below
    0.2% of ``r(0)``); Hann clips up to about 2% and the untapered estimate
    can clip more than ``r(0)`` itself.
    """
    t = _uniform_grid(times)
    r = np.asarray(values, dtype=float)
    if r.shape != t.shape:
        raise ParameterError("values: expected one value per time point")
    if not np.all(np.isfinite(r)):
        raise ParameterError("values: contain NaN or infinite samples (exhausted times?)")
    n = len(t)
    dt = float(t[1] - t[0])
    x = r * _taper(window, n)
    length = 1 << int(math.ceil(math.log2(max(2, int(pad)) * (2 * n - 1))))
    seq = np.zeros(length)
    seq[:n] = x
    seq[length - n + 1 :] = x[1:][::-1]
    spec = dt * np.fft.fft(seq).real
    freqs = np.fft.fftfreq(length, dt)
    order = np.argsort(freqs, kind="stable")
    freqs, spec = freqs[order], spec[order]
    # close the period so the grid is symmetric: -nyquist .. +nyquist
    freqs = np.append(freqs, -freqs[0])
    spec = np.append(spec, spec[0])
    negative = np.minimum(spec, 0.0)
    clipped = max(0.0, float(-np.trapezoid(negative, freqs)))
    return SpectralEstimate(freqs, np.maximum(spec, 0.0), str(window).lower(), n, (0.0, float(t[-1])), clipped)


def convolution_density(times, values, window="blackman", pad=4) -> SpectralEstimate:
    """Density of ``sigma * sigma`` as the transform of ``r(t)**2``.

    For a real flow ``sigma`` is symmetric, so the transform of ``r**2`` is
    the autoconvolution of ``sigma`` (identifying ``sigma`` with its
    reflection).
    """
    r = np.asarray(values, dtype=float)
    return spectral_density(times, r * r, window=window, pad=pad)


def overlap_statistic(d1: SpectralEstimate, d2: SpectralEstimate) -> float:
    """Bhattacharyya affinity ``sum_i sqrt(p_i q_i)`` of the two normalised densities.

    Both densities are linearly interpolated onto the union of their
    frequency grids (zero outside their own range), which keeps the statistic
    symmetric.
    """
    grid = np.union1d(d1.freqs, d2.freqs)
    p = np.interp(grid, d1.freqs, d1.density, left=0.0, right=0.0)
    q = np.interp(grid, d2.freqs, d2.density, left=0.0, right=0.0)
    sp, sq = p.sum(), q.sum()
    if not (sp > 0 and sq > 0):
        raise DegenerateInput("overlap: an estimate has zero mass")
    return float(min(1.0, np.sum(np.sqrt((p / sp) * (q / sq)))))


def _lowdin(basis):
    # inverse square root of the Gram matrix of the centred indicators
    G = basis.identity - basis.theta
    vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    cond = vals.max() / vals.min() if vals.min() > 0 else math.inf
    if not cond <= _GRAM_CONDITION_LIMIT:
        raise BasisDegeneracy(
            "centred indicators are (numerically) linearly dependent; drop a set or use a basis "
            "that does not cover the whole space",
            condition_number=cond,
        )
    return (vecs / np.sqrt(vals)) @ vecs.T


def koopman_compression(stages, basis, t) -> np.ndarray:
    """Compression of ``U_t`` to the span of the centred indicators, orthonormal frame.

    ``K_ij = <U_t e_j, e_i>`` for the Löwdin-orthonormalised centred
    indicators ``e``; the identity at ``t = 0`` and a contraction always.
    """
    W = _lowdin(basis)
    C = analysis.correlation_matrix(stages, basis, t) - basis.theta
    return W @ C @ W


def koopman_compressions(stages, basis, times):
    """Compressions at several times; returns ``(matrices, exhausted)``."""
    W = _lowdin(basis)
    series = analysis.correlation_matrices(stages, basis, times)
    mats = np.einsum("ij,kjl,lm->kim", W, series.matrices - basis.theta[None], W)
    return mats, series.exhausted


def symmetric_embedding(n):
    """Orthonormal basis (columns) of the symmetric tensors in ``R^n (x) R^n``."""
    cols = []
    for a in range(n):
        for b in range(a, n):
            v = np.zeros((n, n))
            if a == b:
                v[a, a] = 1.0
            else:
                v[a, b] = v[b, a] = 1.0 / math.sqrt(2.0)
            cols.append(v.ravel())
    return np.array(cols).T


@dataclass(frozen=True)
class CyclicProbeResult:
    """Dimension of the span of ``{W v}`` over words ``W`` in the operators.

    ``inconclusive`` is set when the budget ran out while the span was
    still growing.  ``rank_history`` lists the rank after each word length.
    """

    mode: str
    rank: int
    dimension: int
    ratio: float
    inconclusive: bool
    rank_history: tuple
    tolerance: float


def cyclic_rank_probe(matrices, mode="full_square", v=None, tol=DEFAULT_RANK_TOL, seed=0, budget=None):
    """Cyclic subspace dimension of ``v`` under the Kronecker squares of ``matrices``.

    ``mode='full_square'`` uses ``K (x) K`` on ``n**2`` dimensions,
    ``'sym_square'`` its restriction to symmetric tensors and ``'base'`` the
    matrices themselves.  Words are explored breadth first; a new direction
    counts when its component orthogonal to the span exceeds ``tol`` times
    the norm of the image it came from.  The rank is stable when a whole
    word length adds nothing (the span is then invariant).
    """
    mats = [np.asarray(K) for K in matrices]
    if not mats:
        raise ParameterError("matrices: at least one matrix is required")
    n = mats[0].shape[0]
    if any(K.shape != (n, n) for K in mats):
        raise ParameterError("matrices: all matrices must be square and of one size")
    if mode == "full_square":
        ops = [np.kron(K, K) for K in mats]
    elif mode == "sym_square":
        P = symmetric_embedding(n)
        ops = [P.T @ np.kron(K, K) @ P for K in mats]
    elif mode == "base":
        ops = mats
    else:
        raise ParameterError(f"mode: expected full_square, sym_square or base, got {mode!r}")
    if not tol > 0:
        raise ParameterError(f"tol: expected a positive real, got {tol!r}")
    dim = ops[0].shape[0]
    dtype = np.result_type(*ops, float)
    if v is None:
        v = np.random.default_rng(seed).standard_normal(dim)
    v = np.asarray(v, dtype=dtype)
    if v.shape != (dim,) or not np.linalg.norm(v) > 0:
        raise ParameterError(f"v: expected a non-zero vector of length {dim}")
    budget = 4 * dim * len(ops) if budget is None else int(budget)

    Q = np.zeros((dim, dim), dtype=dtype)
    Q[:, 0] = v / np.linalg.norm(v)
    rank = 1
    frontier = [0]
    history = [1]
    used = 0
    inconclusive = False
    while frontier and rank < dim:
        new = []
        for k in frontier:
            for A in ops:
                if used >= budget:
                    inconclusive = True
                    break
                used += 1
                w = A @ Q[:, k]
                scale = np.linalg.norm(w)
                if scale == 0:
                    continue
                for _ in range(2):  # re-orthogonalise for stability
                    w = w - Q[:, :rank] @ (Q[:, :rank].conj().T @ w)
                norm = np.linalg.norm(w)
                if norm > tol * scale:
                    Q[:, rank] = w / norm
                    new.append(rank)
                    rank += 1
                    if rank == dim:
                        break
            if inconclusive or rank == dim:
                break
        history.append(rank)
        if inconclusive:
            break
        frontier = new
    return CyclicProbeResult(mode, rank, dim, rank / dim, inconclusive, tuple(history), float(tol))


@dataclass(frozen=True)
class MultiplicityProbeReport:
    """Cyclic ratios of the symmetric and full tensor squares of compressions.

    A probe, not a proof: finite compressions cannot certify multiplicity of
    the infinite-dimensional operator.
    """

    basis_size: int
    times: tuple
    sym_cyclic_ratio: float
    full_cyclic_ratio: float
    base_cyclic_ratio: float
    rank_tolerance: float
    inconclusive: bool
    sym: CyclicProbeResult
    full: CyclicProbeResult
    seed: int

    def rows(self):
        out = []
        for res in (self.full, self.sym):
            out.append(
                {
                    "mode": res.mode,
                    "basis_size": self.basis_size,
                    "rank": res.rank,
                    "dimension": res.dimension,
                    "ratio": res.ratio,
                    "inconclusive": res.inconclusive,
                    "tolerance": res.tolerance,
                }
            )
        return out


def default_probe_times(stages, j=None, count=8):
    """``{h_j} + {k h_1 : k = 1..count}``; ``j`` defaults to three below the deepest stage."""
    j = stages.max_stage - 3 if j is None else int(j)
    h1 = float(stages.heights[1])
    return [StageTime(j, 1, 0.0)] + [k * h1 for k in range(1, count + 1)]


def multiplicity_probe(stages, basis, times=None, tol=DEFAULT_RANK_TOL, seed=0) -> MultiplicityProbeReport:
    """Compare cyclic ratios of ``K (.) K`` and ``K (x) K`` over the sampled compressions.

    One seeded random ``n x n`` matrix ``X`` supplies the starting tensors:
    ``X`` itself for the full square and its symmetric part for the
    symmetric square.  Its first column starts the ``base`` probe on the
    compressions themselves.  The ratios are finite-basis diagnostics and do
    not certify any multiplicity of the flow.
    """
    times = default_probe_times(stages) if times is None else [as_time(t) for t in times]
    mats, exhausted = koopman_compressions(stages, basis, times)
    if exhausted.any():
        bad = [str(t) for t, e in zip(times, exhausted) if e]
        raise DepthExhausted(f"probe times out of reach: {', '.join(bad)}")
    n = len(basis)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, n))
    full = cyclic_rank_probe(mats, "full_square", v=X.ravel(), tol=tol)
    P = symmetric_embedding(n)
    sym = cyclic_rank_probe(mats, "sym_square", v=P.T @ (0.5 * (X + X.T)).ravel(), tol=tol)
    base = cyclic_rank_probe(mats, "base", v=X[:, 0], tol=tol)
    return MultiplicityProbeReport(
        basis_size=n,
        times=tuple(times),
        sym_cyclic_ratio=sym.ratio,
        full_cyclic_ratio=full.ratio,
        base_cyclic_ratio=base.ratio,
        rank_tolerance=float(tol),
        inconclusive=bool(sym.inconclusive or full.inconclusive),
        sym=sym,
        full=full,
        seed=int(seed),
    )
