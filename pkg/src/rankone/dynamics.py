"""Points and strip sets inside a stage's tower, and the flow acting on them.

Every object lives in the rectangle ``[0, w_J) x [0, h_J)`` of some stage
``J``.  The flow ``T_t`` moves points vertically; when a point would leave
the rectangle it is first lifted to a deeper stage (cutting at column
boundaries and adding the column offsets) until the motion fits.  Running
out of stages raises :class:`~rankone.errors.DepthExhausted` rather than
truncating.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DepthExhausted, ParameterError, RankOneError

__all__ = [
    "PointAddress",
    "TowerSet",
    "StripBudgetExceeded",
    "lift_point",
    "lift_point_to",
    "flow_point",
    "lift_set",
    "translate_set",
    "measure",
    "intersect_measure",
    "normalize_strips",
    "slab_set",
    "equal_slabs",
    "DEFAULT_STRIP_BUDGET",
]

GEOM_TOL = 1e-9
DEFAULT_STRIP_BUDGET = 1_000_000


class StripBudgetExceeded(RankOneError):
    """Coarsening could not bring a strip set under its budget."""


@dataclass(frozen=True)
class PointAddress:
    stage: int
    x: float
    y: float


def _check_point(stages, p):
    s = stages.stage(p.stage)
    if not (0.0 <= p.x < s.width and 0.0 <= p.y < s.height):
        raise ParameterError(f"point {p} lies outside the stage-{p.stage} rectangle")
    return s


def lift_point(stages, p: PointAddress) -> PointAddress:
    """Address of ``p`` one stage deeper."""
    s = _check_point(stages, p)
    if p.stage >= stages.max_stage:
        raise DepthExhausted(f"cannot lift beyond stage {stages.max_stage}", 0.0)
    w = s.next_width
    col = min(int(p.x // w), s.cuts - 1)
    x = min(max(p.x - col * w, 0.0), math.nextafter(w, 0.0))
    return PointAddress(p.stage + 1, x, p.y + float(s.column_offsets[col]))


def lift_point_to(stages, p, stage):
    if stage < p.stage:
        raise ParameterError(f"target stage {stage} is above the point's stage {p.stage}")
    while p.stage < stage:
        p = lift_point(stages, p)
    return p


def flow_point(stages, p: PointAddress, t: float) -> PointAddress:
    """``T_t p`` at the first stage with enough headroom for the motion."""
    _check_point(stages, p)
    t = float(t)
    while True:
        h = stages.heights[p.stage]
        if (t >= 0 and p.y + t < h) or (t < 0 and p.y + t >= 0):
            return PointAddress(p.stage, p.x, p.y + t)
        if p.stage == stages.max_stage:
            safe = h - p.y if t >= 0 else p.y
            raise DepthExhausted(
                f"no headroom for t={t!r} within stage {stages.max_stage}", max_safe_time=safe
            )
        p = lift_point(stages, p)


def _merge_intervals(lo, hi):
    order = np.argsort(lo, kind="stable")
    lo, hi = lo[order], hi[order]
    out = []
    cur_lo, cur_hi = lo[0], hi[0]
    for a, b in zip(lo[1:], hi[1:]):
        if a <= cur_hi:
            cur_hi = max(cur_hi, b)
        else:
            out.append((cur_lo, cur_hi))
            cur_lo, cur_hi = a, b
    out.append((cur_lo, cur_hi))
    return out


def normalize_strips(strips):
    """Canonical disjoint decomposition of a union of rectangles.

    The plane is cut at every x breakpoint, the y-intervals over each
    elementary x-range are merged, and neighbouring x-ranges carrying the same
    y-intervals are fused.  The output depends only on the point set, so
    normalising twice is a no-op.
    """
    strips = np.asarray(strips, dtype=float).reshape(-1, 4)
    keep = (strips[:, 1] > strips[:, 0]) & (strips[:, 3] > strips[:, 2])
    strips = strips[keep]
    if len(strips) == 0:
        return np.zeros((0, 4))
    xs = np.unique(strips[:, :2])
    runs = []  # [x0, x1, y-interval tuple]
    for a, b in zip(xs[:-1], xs[1:]):
        cover = (strips[:, 0] <= a) & (strips[:, 1] >= b)
        if not cover.any():
            runs.append(None)
            continue
        ys = tuple(_merge_intervals(strips[cover, 2], strips[cover, 3]))
        prev = runs[-1] if runs else None
        if prev is not None and prev[1] == a and prev[2] == ys:
            prev[1] = b
        else:
            runs.append([a, b, ys])
    out = []
    for run in runs:
        if run is not None:
            x0, x1, ys = run
            out.extend((x0, x1, y0, y1) for y0, y1 in ys)
    out.sort(key=lambda r: (r[0], r[2]))
    return np.array(out, dtype=float).reshape(-1, 4)


@dataclass(frozen=True, eq=False)
class TowerSet:
    """Finite union of half-open rectangles ``[x0,x1) x [y0,y1)`` in stage ``stage``.

    ``strips`` is an ``(N, 4)`` float array with columns ``x0, x1, y0, y1``.
    Use :meth:`from_strips` for user input (validates and normalises);
    the flow operations build instances directly because they preserve
    disjointness.  ``coarsening_error`` bounds the area added by any strip
    merging forced by the strip budget.  ``spans`` holds each strip's height
    as carried through lifts and translations; high in a tower ``y1 - y0``
    loses the low bits of a thin strip, so the mass is computed from
    ``spans`` instead.
    """

    stages: object = field(repr=False)
    stage: int
    strips: np.ndarray
    coarsening_error: float = 0.0
    spans: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        arr = np.array(self.strips, dtype=float).reshape(-1, 4)
        arr.setflags(write=False)
        object.__setattr__(self, "strips", arr)
        spans = arr[:, 3] - arr[:, 2] if self.spans is None else np.array(self.spans, dtype=float).reshape(-1)
        if len(spans) != len(arr):
            raise ParameterError(f"spans: expected {len(arr)} heights, got {len(spans)}")
        spans.setflags(write=False)
        object.__setattr__(self, "spans", spans)

    @classmethod
    def from_strips(cls, stages, stage, strips):
        s = stages.stage(stage)
        arr = np.array(strips, dtype=float).reshape(-1, 4)
        tol_x, tol_y = GEOM_TOL * s.width, GEOM_TOL * s.height
        bad = (
            (arr[:, 0] < -tol_x)
            | (arr[:, 1] > s.width + tol_x)
            | (arr[:, 2] < -tol_y)
            | (arr[:, 3] > s.height + tol_y)
            | (arr[:, 1] < arr[:, 0])
            | (arr[:, 3] < arr[:, 2])
        )
        if bad.any():
            k = int(np.flatnonzero(bad)[0])
            raise ParameterError(f"strip {k} {tuple(arr[k])} does not fit the stage-{stage} rectangle")
        arr[:, :2] = np.clip(arr[:, :2], 0.0, s.width)
        arr[:, 2:] = np.clip(arr[:, 2:], 0.0, s.height)
        return cls(stages, stage, normalize_strips(arr))

    @classmethod
    def empty(cls, stages, stage):
        return cls(stages, stage, np.zeros((0, 4)))

    def __len__(self):
        return len(self.strips)

    @property
    def raw_mass(self):
        s = self.strips
        return math.fsum((s[:, 1] - s[:, 0]) * self.spans)

    def normalized(self):
        return TowerSet(self.stages, self.stage, normalize_strips(self.strips), self.coarsening_error)

    def level_intervals(self):
        """Merged ``(y0, y1)`` intervals if every strip spans the full width, else ``None``."""
        w = self.stages.widths[self.stage]
        s = self.strips
        if len(s) == 0:
            return np.zeros((0, 2))
        full = (s[:, 0] <= GEOM_TOL * w) & (s[:, 1] >= w * (1 - GEOM_TOL))
        if not full.all():
            return None
        return np.array(_merge_intervals(s[:, 2], s[:, 3]), dtype=float)


def slab_set(stages, stage, y0, y1):
    """Full-width slab ``[0, w_J) x [y0, y1)`` of stage ``J``."""
    return TowerSet.from_strips(stages, stage, [(0.0, stages.widths[stage], y0, y1)])


def equal_slabs(stages, stage, n):
    """The stage tower cut into ``n`` full-width slabs of equal height."""
    if n < 1:
        raise ParameterError(f"n: expected a positive slab count, got {n!r}")
    h = stages.heights[stage]
    edges = np.linspace(0.0, h, n + 1)
    edges[-1] = h
    return [slab_set(stages, stage, a, b) for a, b in zip(edges[:-1], edges[1:])]


def _coarsen(strips, spans, budget):
    """Merge vertically adjacent strips sharing an x-range until under budget."""
    order = np.lexsort((strips[:, 2], strips[:, 1], strips[:, 0]))
    s = strips[order]
    same = (s[1:, 0] == s[:-1, 0]) & (s[1:, 1] == s[:-1, 1])
    gaps = np.where(same, s[1:, 2] - s[:-1, 3], np.inf)
    excess = len(s) - budget
    if excess <= 0:
        return strips, spans, 0.0
    if np.isfinite(gaps).sum() < excess:
        raise StripBudgetExceeded(f"{len(s)} strips cannot be coarsened to {budget}")
    threshold = np.partition(gaps, excess - 1)[excess - 1]
    merge = gaps <= threshold
    error = math.fsum(gaps[merge] * (s[1:, 1] - s[1:, 0])[merge])
    starts = np.flatnonzero(np.concatenate(([True], ~merge)))
    ends = np.concatenate((starts[1:], [len(s)])) - 1
    out = np.column_stack((s[starts, 0], s[starts, 1], s[starts, 2], s[ends, 3]))
    return out, out[:, 3] - out[:, 2], error


def _lift_strips(stages, J, strips, spans):
    s = stages.stage(J)
    w = s.next_width
    x0, x1 = strips[:, 0], strips[:, 1]
    first = np.floor(x0 / w + GEOM_TOL).astype(np.int64)
    last = np.ceil(x1 / w - GEOM_TOL).astype(np.int64) - 1
    first = np.clip(first, 0, s.cuts - 1)
    last = np.clip(last, first, s.cuts - 1)
    counts = last - first + 1
    rep = np.repeat(np.arange(len(strips)), counts)
    col = np.repeat(first, counts) + (np.arange(len(rep)) - np.repeat(np.cumsum(counts) - counts, counts))
    base = col * w
    nx0 = np.clip(np.maximum(x0[rep], base) - base, 0.0, w)
    nx1 = np.clip(np.minimum(x1[rep], base + w) - base, 0.0, w)
    shift = np.asarray(s.column_offsets)[col]
    out = np.column_stack((nx0, nx1, strips[rep, 2] + shift, strips[rep, 3] + shift))
    keep = out[:, 1] > out[:, 0]
    return out[keep], spans[rep][keep]


def lift_set(stages, S: TowerSet, target_stage: int, budget: int = DEFAULT_STRIP_BUDGET) -> TowerSet:
    """Re-express ``S`` in a deeper stage; the raw mass is unchanged unless coarsened."""
    if target_stage < S.stage:
        raise ParameterError(f"target stage {target_stage} is above the set's stage {S.stage}")
    if target_stage > stages.max_stage:
        raise DepthExhausted(f"stage {target_stage} exceeds max stage {stages.max_stage}")
    strips, spans, error = np.asarray(S.strips), S.spans, S.coarsening_error
    for J in range(S.stage, target_stage):
        strips, spans = _lift_strips(stages, J, strips, spans)
        if len(strips) > budget:
            strips, spans, extra = _coarsen(strips, spans, budget)
            error += extra
    return TowerSet(stages, target_stage, strips, error, spans)


def translate_set(
    stages,
    S: TowerSet,
    t: float,
    budget: int = DEFAULT_STRIP_BUDGET,
    allow_loss: bool = False,
    loss_tol: float = 0.0,
) -> TowerSet:
    """``T_t S``, returned at the deepest stage any piece needed.

    Pieces are translated as soon as they have headroom; the rest keep being
    lifted.  If some piece never fits, :class:`DepthExhausted` is raised
    (with the largest safe ``|t|`` for the stuck pieces), unless
    ``allow_loss`` is set: then the stuck pieces are dropped and their area
    is added to ``coarsening_error`` of the result.
    """
    t = float(t)
    done = []
    pending, spans = np.asarray(S.strips), S.spans
    J = S.stage
    error = S.coarsening_error
    while True:
        h = stages.heights[J]
        ok = pending[:, 3] + t <= h if t >= 0 else pending[:, 2] + t >= 0
        if ok.any():
            moved = pending[ok].copy()
            moved[:, 2:] += t
            done.append((J, moved, spans[ok]))
        pending, spans = pending[~ok], spans[~ok]
        if len(pending) == 0:
            break
        stuck = math.fsum((pending[:, 1] - pending[:, 0]) * spans)
        if allow_loss and stuck <= loss_tol:
            error += stuck
            break
        if J == stages.max_stage:
            if allow_loss:
                error += stuck
                break
            safe = float(np.min(h - pending[:, 3])) if t >= 0 else float(np.min(pending[:, 2]))
            raise DepthExhausted(
                f"set translation by t={t!r} needs more than {stages.max_stage} stages",
                max_safe_time=max(safe, 0.0),
            )
        pending, spans = _lift_strips(stages, J, pending, spans)
        J += 1
    parts, part_spans = [np.zeros((0, 4))], [np.zeros(0)]
    for stage, strips, heights in done:
        lifted = lift_set(stages, TowerSet(stages, stage, strips, spans=heights), J, budget)
        error += lifted.coarsening_error
        parts.append(lifted.strips)
        part_spans.append(lifted.spans)
    return TowerSet(stages, J, np.concatenate(parts), error, np.concatenate(part_spans))


def measure(S: TowerSet) -> float:
    """Probability of ``S``: raw area over the normalising mass ``m_inf``."""
    return S.raw_mass / S.stages.total_mass


def _overlap_area(a, b):
    if len(a) == 0 or len(b) == 0:
        return 0.0
    order = np.argsort(b[:, 2], kind="stable")
    b = b[order]
    tallest = float(np.max(b[:, 3] - b[:, 2]))
    lo = np.searchsorted(b[:, 2], a[:, 2] - tallest, side="left")
    hi = np.searchsorted(b[:, 2], a[:, 3], side="left")
    counts = hi - lo
    ia = np.repeat(np.arange(len(a)), counts)
    ib = np.repeat(lo, counts) + (np.arange(len(ia)) - np.repeat(np.cumsum(counts) - counts, counts))
    dx = np.minimum(a[ia, 1], b[ib, 1]) - np.maximum(a[ia, 0], b[ib, 0])
    dy = np.minimum(a[ia, 3], b[ib, 3]) - np.maximum(a[ia, 2], b[ib, 2])
    return math.fsum(np.clip(dx, 0, None) * np.clip(dy, 0, None))


def intersect_measure(A: TowerSet, B: TowerSet) -> float:
    """``mu(A & B)``, exact up to rounding once both sets share a stage."""
    stages = A.stages
    J = max(A.stage, B.stage)
    a = lift_set(stages, A, J).strips
    b = lift_set(stages, B, J).strips
    return _overlap_area(np.asarray(a), np.asarray(b)) / stages.total_mass
