"""Correlation matrices over test bases and weak-limit fits.

The central object is the matrix ``M(t)_ab = mu(T_t E_a & E_b)`` for a
finite family of sets.  Its least-squares decomposition over a small
dictionary (``Theta``: product measure, ``Id``: no motion, ``Avg(a)``: time
average of the flow over ``[0, a]``) is the finite window used here onto
weak limits of ``T_t``.

Bases made of full-width slabs use the pair-list engine of
:mod:`rankone.levels`, which reaches times of order ``h_j`` for ``j`` close
to the deepest built stage.  Other bases fall back on the strip engine.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, levels
from .errors import DegenerateDictionary, DepthExhausted, ParameterError
from .levels import StageTime, as_time, time_value

__all__ = [
    "TestBasis",
    "CorrelationResult",
    "MatrixSeries",
    "WeakLimitFit",
    "TimeWindow",
    "LemmaScanRow",
    "LemmaScan",
    "DecayPoint",
    "correlation",
    "correlation_matrix",
    "correlation_matrices",
    "window_matrices",
    "fit_weak_limit",
    "default_lemma_windows",
    "scan_lemma_times",
    "mixing_decay_profile",
    "feasible_stage_times",
    "DICTIONARY_NAMES",
    "FEASIBLE_BOUND",
]

DICTIONARY_NAMES = ("Theta", "Id", "Avg")
DEFAULT_QUADRATURE_POINTS = 64
_GRAM_CONDITION_LIMIT = 1e12
_EXACT_STRIP_LIMIT = 100_000
FEASIBLE_BOUND = 1e-6
_STRIP_LOSS_TOL = 1e-6  # raw area; strip counts grow like prod r_j per lifted stage


@dataclass(frozen=True, eq=False)
class TestBasis:
    """Finite family of sets ``E_1..E_n`` with cached measures.

    When every set is a union of full-width slabs of one stage, ``intervals``
    holds their height intervals and ``stage`` that stage; correlations are
    then computed with the pair-list engine.
    """

    __test__ = False  # not a pytest class

    sets: tuple
    measures: np.ndarray
    stage: int
    intervals: tuple | None = None
    label: str = "custom"
    _avg_cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_sets(cls, sets, label="custom"):
        sets = tuple(sets)
        if not sets:
            raise ParameterError("basis: at least one set is required")
        stages = sets[0].stages
        stage = max(s.stage for s in sets)
        lifted = tuple(dynamics.lift_set(stages, s, stage) for s in sets)
        measures = np.array([dynamics.measure(s) for s in lifted])
        if np.any(measures <= 0):
            k = int(np.flatnonzero(measures <= 0)[0])
            raise ParameterError(f"basis: set {k} has zero measure")
        ivs = [s.level_intervals() for s in lifted]
        intervals = None if any(iv is None for iv in ivs) else tuple(ivs)
        measures.setflags(write=False)
        return cls(lifted, measures, stage, intervals, label)

    @classmethod
    def equal_slabs(cls, stages, n=16, stage=3):
        """``n`` full-width slabs of equal height partitioning the stage tower."""
        if not 1 <= stage <= stages.max_stage:
            raise ParameterError(f"basis stage {stage} outside 1..{stages.max_stage}")
        return cls.from_sets(dynamics.equal_slabs(stages, stage, n), label=f"equal_slabs(n={n}, stage={stage})")

    @property
    def stages(self):
        return self.sets[0].stages

    def __len__(self):
        return len(self.sets)

    @property
    def theta(self):
        """``Theta_ab = mu(E_a) mu(E_b)``."""
        return np.outer(self.measures, self.measures)

    @property
    def identity(self):
        """``I_ab = mu(E_a & E_b)``."""
        key = "identity"
        if key not in self._avg_cache:
            if self.intervals is not None:
                M = levels.evaluate_pairs(_unit_pairs(self.stages, self.stage), self.intervals) / self.stages.total_mass
            else:
                M = np.array([[dynamics.intersect_measure(a, b) for b in self.sets] for a in self.sets])
            self._avg_cache[key] = M
        return self._avg_cache[key]

    @property
    def edges(self):
        """Shift cells on which every overlap of the basis is linear (slab bases only)."""
        if "edges" not in self._avg_cache:
            h = float(self.stages.heights[self.stage])
            self._avg_cache["edges"] = levels.breakpoint_edges(self.intervals, h)
        return self._avg_cache["edges"]

    def average_matrix(self, a, points=None):
        """``(1/a) int_0^a M(s) ds``.

        Slab bases are integrated exactly (correlations are piecewise linear
        in ``s``); ``points`` selects the composite midpoint rule instead,
        which is also the method for general strip bases
        (default ``DEFAULT_QUADRATURE_POINTS`` nodes there).
        """
        a = float(a)
        if not (a > 0 and math.isfinite(a)):
            raise ParameterError(f"a: expected a positive window length, got {a!r}")
        if points is not None and int(points) < 1:
            raise ParameterError(f"points: expected a positive integer, got {points!r}")
        key = ("avg", a, points)
        if key not in self._avg_cache:
            m = self.stages.total_mass
            if self.intervals is not None and points is None:
                M = levels.average_matrix(self.stages, self.stage, a, self.intervals)[0] / m
            else:
                points = DEFAULT_QUADRATURE_POINTS if points is None else int(points)
                nodes = (np.arange(points) + 0.5) * (a / points)
                if self.intervals is not None:
                    we = levels.window_expansion(self.stages, self.stage, 0.0, nodes, self.edges)
                    M = levels.evaluate_pairs(we.total(np.full(points, 1.0 / points)), self.intervals) / m
                else:
                    M = np.mean([correlation_matrix(self.stages, self, s) for s in nodes], axis=0)
            self._avg_cache[key] = M
        return self._avg_cache[key]

    def describe(self):
        return {"label": self.label, "size": len(self), "stage": self.stage}


def _unit_pairs(stages, stage):
    # the zero shift, weighted by the width of the stage the intervals live in
    return levels.PairList(np.array([float(stages.widths[stage])]), np.zeros(1), 0.0, stage)


@dataclass(frozen=True)
class CorrelationResult:
    value: float
    stage_used: int
    tail_bound: float


def correlation(stages, A, B, t) -> CorrelationResult:
    """``mu(T_t A & B)`` with the stage it was resolved at and an error bound.

    ``tail_bound`` bounds the (normalised) area of orbits that could not be
    followed within the built stages; it is zero when the motion fits.
    """
    t = as_time(t)
    ia, ib = A.level_intervals(), B.level_intervals()
    m = stages.total_mass
    if ia is not None and ib is not None:
        base = max(A.stage, B.stage)
        ia = levels.lift_intervals(stages, ia, A.stage, base)
        ib = levels.lift_intervals(stages, ib, B.stage, base)
        edges = levels.breakpoint_edges([ia, ib], float(stages.heights[base]))
        pl = levels.window_expansion(stages, base, t, [0.0], edges).pairs(0)
        if pl.bound == 0:
            value = levels.evaluate_pairs(pl, [ia, ib])[0, 1] / m
            return CorrelationResult(float(value), max(pl.stage_used, base), 0.0)
        # the pair bound ignores where the sets sit; the strip engine may still fit exactly
        try:
            TA = dynamics.translate_set(stages, A, time_value(stages, t), budget=_EXACT_STRIP_LIMIT)
        except (DepthExhausted, dynamics.StripBudgetExceeded):
            TA = None
        if TA is None or TA.coarsening_error > 0:
            value = levels.evaluate_pairs(pl, [ia, ib])[0, 1] / m
            return CorrelationResult(float(value), max(pl.stage_used, base), pl.bound / m)
        return CorrelationResult(dynamics.intersect_measure(TA, B), max(TA.stage, B.stage), 0.0)
    TA = dynamics.translate_set(stages, A, time_value(stages, t), allow_loss=True, loss_tol=_STRIP_LOSS_TOL)
    value = dynamics.intersect_measure(TA, B)
    return CorrelationResult(value, max(TA.stage, B.stage), (TA.coarsening_error + B.coarsening_error) / m)


@dataclass(frozen=True)
class MatrixSeries:
    """Correlation matrices at a list of times.

    Rows whose time could not be reached are flagged in ``exhausted`` and
    filled with NaN.
    """

    times: tuple
    matrices: np.ndarray
    stage_used: np.ndarray
    bounds: np.ndarray
    exhausted: np.ndarray


def _matrix_at(stages, basis, t):
    m = stages.total_mass
    if basis.intervals is not None:
        pl = levels.window_expansion(stages, basis.stage, t, [0.0], basis.edges).pairs(0)
        return levels.evaluate_pairs(pl, basis.intervals) / m, max(pl.stage_used, basis.stage), pl.bound / m
    n = len(basis)
    M = np.zeros((n, n))
    used, bound = basis.stage, 0.0
    for a, A in enumerate(basis.sets):
        TA = dynamics.translate_set(stages, A, time_value(stages, t), allow_loss=True, loss_tol=_STRIP_LOSS_TOL)
        used, bound = max(used, TA.stage), max(bound, TA.coarsening_error / m)
        for b, B in enumerate(basis.sets):
            M[a, b] = dynamics.intersect_measure(TA, B)
    return M, used, bound


def correlation_matrix(stages, basis: TestBasis, t) -> np.ndarray:
    """``M(t)_ab = mu(T_t E_a & E_b)``; raises :class:`DepthExhausted` if ``t`` is out of reach."""
    return _matrix_at(stages, basis, as_time(t))[0]


def correlation_matrices(stages, basis: TestBasis, times, workers: int = 1) -> MatrixSeries:
    """Matrices at several times; unreachable times are marked, not dropped.

    ``workers > 1`` evaluates times on a thread pool; the output order and
    values do not depend on the worker count.
    """
    times = tuple(as_time(t) for t in times)
    n = len(basis)

    def one(t):
        try:
            return _matrix_at(stages, basis, t)
        except DepthExhausted:
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, times))
    else:
        results = [one(t) for t in times]
    mats = np.full((len(times), n, n), np.nan)
    used = np.zeros(len(times), dtype=np.int64)
    bounds = np.full(len(times), np.nan)
    exhausted = np.zeros(len(times), dtype=bool)
    for k, res in enumerate(results):
        if res is None:
            exhausted[k] = True
        else:
            mats[k], used[k], bounds[k] = res
    return MatrixSeries(times, mats, used, bounds, exhausted)


def window_matrices(stages, basis: TestBasis, center, offsets) -> MatrixSeries:
    """Matrices at ``center + offsets[m]``, sharing the lifting work across the window.

    ``center`` may be a stage-relative time such as ``'3h40'``; the offsets
    then stay exact however large ``h_j`` is.  If the window as a whole is out
    of reach its times are evaluated one by one so that only the unreachable
    ones are flagged.
    """
    c = as_time(center)
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    if isinstance(c, StageTime):
        times = tuple(StageTime(c.stage, c.multiple, c.offset + float(u)) for u in offsets)
    else:
        times = tuple(c + float(u) for u in offsets)
    if basis.intervals is None:
        return correlation_matrices(stages, basis, times)
    try:
        we = levels.window_expansion(stages, basis.stage, c, offsets, basis.edges)
    except DepthExhausted:
        return correlation_matrices(stages, basis, times)
    m = stages.total_mass
    mats = we.evaluate(basis.intervals) / m
    used = np.full(len(times), max(we.stage_used, basis.stage), dtype=np.int64)
    return MatrixSeries(times, mats, used, we.bounds / m, np.zeros(len(times), dtype=bool))


@dataclass(frozen=True)
class WeakLimitFit:
    """Least-squares weights of ``M(t)`` over a dictionary of limit operators.

    Coefficients of operators outside the dictionary are NaN.  ``residual``
    is ``||M - fit||_F / ||M||_F``.
    """

    t: object
    alpha: float
    beta: float
    gamma: float
    a: float | None
    residual: float
    dictionary: tuple = ("Theta", "Id")

    def row(self):
        return {
            "t": str(self.t),
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "a": "" if self.a is None else self.a,
            "residual": self.residual,
        }


def _parse_dictionary(dictionary):
    names = []
    for name in dictionary:
        key = str(name).strip()
        if key.lower().startswith("avg"):
            key = "Avg"
        matches = [d for d in DICTIONARY_NAMES if d.lower() == key.lower()]
        if not matches:
            raise ParameterError(f"dictionary: unknown operator {name!r} (expected Theta, Id or Avg)")
        if matches[0] in names:
            raise ParameterError(f"dictionary: {matches[0]} listed twice")
        names.append(matches[0])
    if not names:
        raise ParameterError("dictionary: empty")
    return tuple(names)


def fit_weak_limit(M, basis: TestBasis, dictionary=("Theta", "Id"), a=None, t=None) -> WeakLimitFit:
    """Fit ``M`` by ``alpha Theta + beta I + gamma A(a)`` over the chosen terms.

    Raises :class:`DegenerateDictionary` when the chosen dictionary matrices
    are (numerically) linearly dependent over this basis.
    """
    names = _parse_dictionary(dictionary)
    if "Avg" in names and a is None:
        raise ParameterError("a: the Avg dictionary term needs a window length")
    M = np.asarray(M, dtype=float)
    n = len(basis)
    if M.shape != (n, n):
        raise ParameterError(f"M: expected shape {(n, n)}, got {M.shape}")
    mats = {"Theta": basis.theta, "Id": basis.identity}
    if "Avg" in names:
        mats["Avg"] = basis.average_matrix(a)
    D = np.column_stack([mats[k].ravel() for k in names])
    gram = D.T @ D
    cond = np.linalg.cond(gram)
    if not np.isfinite(cond) or cond > _GRAM_CONDITION_LIMIT:
        raise DegenerateDictionary(f"dictionary {names} is degenerate over this basis (Gram condition {cond:.3g})")
    coef, *_ = np.linalg.lstsq(D, M.ravel(), rcond=None)
    norm = np.linalg.norm(M)
    misfit = np.linalg.norm(M.ravel() - D @ coef)
    residual = float(misfit / norm) if norm > 0 else float(misfit)
    values = dict(zip(names, coef.tolist()))
    return WeakLimitFit(
        t=t,
        alpha=values.get("Theta", math.nan),
        beta=values.get("Id", math.nan),
        gamma=values.get("Avg", math.nan),
        a=None if a is None else float(a),
        residual=residual,
        dictionary=names,
    )


@dataclass(frozen=True)
class TimeWindow:
    """Times ``center + u`` for ``u`` in ``[-radius, radius]``."""

    center: object
    radius: float

    def offsets(self, step):
        count = int(math.floor(2 * self.radius / step + 1e-9))
        return -self.radius + step * np.arange(count + 1)

    def samples(self, step):
        us = self.offsets(step)
        c = as_time(self.center)
        if isinstance(c, StageTime):
            return [StageTime(c.stage, c.multiple, c.offset + float(u)) for u in us]
        return [c + float(u) for u in us]


def default_lemma_windows(stages, a, j=None, eps=None):
    """Windows of radius ``2a`` around ``k h_j`` for ``k = 1..ceil(a sqrt(j) / eps)``.

    ``j`` defaults to three stages above the deepest one, the largest index
    whose multiples stay resolvable with a negligible leak bound; ``eps``
    defaults to the recipe's epsilon at ``j`` (0.5 for families without one).
    """
    if j is None:
        j = stages.max_stage - 3
    if not 1 <= j < stages.max_stage:
        raise ParameterError(f"j: expected 1..{stages.max_stage - 1}, got {j!r}")
    if eps is None:
        eps = stages.params.eps_at(j) or 0.5
    kmax = min(math.ceil(a * math.sqrt(j) / eps), int(stages.cuts[j]))
    return [TimeWindow(StageTime(j, k, 0.0), 2.0 * a) for k in range(1, kmax + 1)]


@dataclass(frozen=True)
class LemmaScanRow:
    t: object
    pair: WeakLimitFit
    integral: WeakLimitFit
    bound: float


@dataclass(frozen=True)
class LemmaScan:
    """Scan result: rows sorted by the integral-family residual.

    ``improvement`` is the ratio of the best ``{Theta, Id}`` residual to the
    best ``{Theta, Avg(a)}`` residual over the same times (above 1 when the
    integral family fits better somewhere).
    """

    a: float
    rows: tuple
    best_pair: LemmaScanRow
    best_integral: LemmaScanRow
    exhausted: tuple

    @property
    def improvement(self):
        r = self.best_integral.integral.residual
        return self.best_pair.pair.residual / r if r > 0 else math.inf


def scan_lemma_times(stages, basis: TestBasis, a, windows, step=None, workers: int = 1) -> LemmaScan:
    """Fit ``{Theta, Id}`` and ``{Theta, Avg(a)}`` at every sampled time of the windows."""
    windows = list(windows)
    if not windows:
        raise ParameterError("windows: at least one time window is required")
    step = a / 32 if step is None else float(step)
    if not step > 0:
        raise ParameterError(f"step: expected a positive real, got {step!r}")

    def one(w):
        return window_matrices(stages, basis, w.center, w.offsets(step))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, windows))
    else:
        parts = [one(w) for w in windows]
    rows, exhausted = [], []
    samples = ((t, M, b, x) for p in parts for t, M, b, x in zip(p.times, p.matrices, p.bounds, p.exhausted))
    for t, M, bound, bad in samples:
        if bad:
            exhausted.append(t)
            continue
        rows.append(
            LemmaScanRow(
                t,
                fit_weak_limit(M, basis, ("Theta", "Id"), t=t),
                fit_weak_limit(M, basis, ("Theta", "Avg"), a=a, t=t),
                float(bound),
            )
        )
    if not rows:
        raise DepthExhausted("no scan time was within reach", max_safe_time=float(stages.heights[-1]))
    best_pair = min(rows, key=lambda r: r.pair.residual)
    best_integral = min(rows, key=lambda r: r.integral.residual)
    rows.sort(key=lambda r: r.integral.residual)
    return LemmaScan(float(a), tuple(rows), best_pair, best_integral, tuple(exhausted))


@dataclass(frozen=True)
class DecayPoint:
    t: object
    deviation: float
    stage_used: int
    bound: float
    exhausted: bool


def mixing_decay_profile(stages, basis: TestBasis, times, workers: int = 1) -> list:
    """``sup_ab |M(t)_ab - mu(E_a) mu(E_b)|`` at each time; unreachable times are flagged."""
    series = correlation_matrices(stages, basis, times, workers=workers)
    theta = basis.theta
    out = []
    for t, M, used, bound, bad in zip(series.times, series.matrices, series.stage_used, series.bounds, series.exhausted):
        dev = math.nan if bad else float(np.max(np.abs(M - theta)))
        out.append(DecayPoint(t, dev, int(used), float(bound), bool(bad)))
    return out


def feasible_stage_times(stages, basis: TestBasis, count=5, bound_tol=FEASIBLE_BOUND) -> list:
    """The ``count`` largest ``j`` with ``h_j`` reachable and reported bound at most ``bound_tol``.

    Returned in increasing order of ``j`` as ``StageTime`` values.  Near the
    deepest stage the expansion runs out of columns and the bound grows
    quickly, which is what limits the search.
    """
    out = []
    for j in range(stages.max_stage, 0, -1):
        series = correlation_matrices(stages, basis, [StageTime(j)])
        if not series.exhausted[0] and series.bounds[0] <= bound_tol:
            out.append(StageTime(j))
            if len(out) == count:
                break
    return out[::-1]
