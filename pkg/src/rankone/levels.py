"""Correlation engine for full-width ("level") sets.

A set that spans the full width of its stage-``J0`` tower is described by
its height intervals alone, and so is every lift of it: inside stage ``K``
it is the same interval pattern repeated at the positions of the copies of
the stage-``J0`` tower.  For two such sets the area of ``T_t A & B`` is then
a weighted sum

    sum_k  weight_k * |A & (B - shift_k)|          (heights at stage J0)

over pairs of copies.  This module produces the ``(weight, shift)`` lists
and evaluates them; everything else (bases, fits, spectra) is built on it.

Two expansions are used.

*Exact lifting* (moderate ``t``): lift to the first stage ``K`` with
``h_K >= t``, pair up copies, and resolve orbits that leave the top of the
stage-``K`` tower stage by stage through the column structure.  Only orbits
still unresolved at the deepest built stage are lost; their area is
returned as ``bound``.

*Renormalised expansion* (``t = k h_R + u`` with ``R`` too deep to
enumerate copies): pair the columns of stage ``R`` inside stage ``R + 1``
symbolically (multiples of ``h_R`` cancel exactly, so no precision is lost
at astronomically large ``t``) and replace the stage-``R`` restricted
correlation at the small residual shift by the true correlation, which is
computed recursively.  Each replacement can be off by at most the area of
orbits leaving the stage-``R`` tower, and pairs whose shift is close to
``+-h_R`` are dropped; both errors are added to ``bound``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import DepthExhausted, ParameterError

__all__ = [
    "StageTime",
    "PairList",
    "as_time",
    "time_value",
    "level_positions",
    "pair_expansion",
    "pair_expansions",
    "evaluate_pairs",
    "lift_intervals",
    "breakpoint_edges",
    "compress_pairs",
    "DEFAULT_COPY_BUDGET",
]

DEFAULT_COPY_BUDGET = 20_000
_CHUNK = 2_000_000
# leaked orbits carrying less area than this are not resolved further
LEAK_TOL = 1e-15


@dataclass(frozen=True)
class StageTime:
    """The time ``multiple * h_stage + offset``.

    Used instead of a float when ``h_stage`` is so large that ``offset``
    would be lost to rounding.
    """

    stage: int
    multiple: int = 1
    offset: float = 0.0

    def __str__(self):
        head = f"{self.multiple}h{self.stage}" if self.multiple != 1 else f"h{self.stage}"
        if self.offset:
            return f"{head}{self.offset:+}"
        return head

    def __neg__(self):
        return StageTime(self.stage, -self.multiple, -self.offset)


_TIME_RE = re.compile(r"^\s*(?:(?P<k>[+-]?\d+)\s*\*?\s*)?h(?P<j>\d+)\s*(?P<u>[+-]\s*[0-9.eE+-]+)?\s*$")


def as_time(value):
    """Parse ``2.5``, ``'h12'``, ``'3h40+0.25'`` or ``'3*h40-1'`` into a float or :class:`StageTime`."""
    if isinstance(value, StageTime):
        return value
    if isinstance(value, (int, float, np.floating, np.integer)):
        return float(value)
    text = str(value).strip()
    try:
        return float(text)
    except ValueError:
        pass
    m = _TIME_RE.match(text)
    if not m:
        raise ParameterError(f"time: cannot parse {value!r} (use a number or e.g. '3h40+0.5')")
    k = int(m.group("k")) if m.group("k") else 1
    u = float(m.group("u").replace(" ", "")) if m.group("u") else 0.0
    return StageTime(int(m.group("j")), k, u)


def time_value(stages, t):
    """Float value of a time (may overflow to ``inf`` only if ``h`` does)."""
    if isinstance(t, StageTime):
        return t.multiple * float(stages.heights[t.stage]) + t.offset
    return float(t)


@dataclass(frozen=True)
class PairList:
    """``sum_k weights[k] * |A & (B - shifts[k])|`` plus an error bound (areas)."""

    weights: np.ndarray
    shifts: np.ndarray
    bound: float
    stage_used: int

    def negated(self):
        return PairList(self.weights, -self.shifts, self.bound, self.stage_used)

    def scaled(self, factor):
        return PairList(self.weights * factor, self.shifts, self.bound * abs(factor), self.stage_used)

    @staticmethod
    def concat(parts, stage_used=None):
        parts = list(parts)
        if not parts:
            return PairList(np.zeros(0), np.zeros(0), 0.0, stage_used or 0)
        return PairList(
            np.concatenate([p.weights for p in parts]),
            np.concatenate([p.shifts for p in parts]),
            math.fsum(p.bound for p in parts),
            max(p.stage_used for p in parts) if stage_used is None else stage_used,
        )


def _cache(stages):
    cache = stages.__dict__.setdefault("_level_cache", {})
    return cache


def level_positions(stages, base, K):
    """Sorted heights of the copies of the stage-``base`` tower inside stage ``K``."""
    key = ("pos", base, K)
    cache = _cache(stages)
    if key not in cache:
        pos = np.zeros(1)
        for k in range(base, K):
            pos = (stages.stage(k).column_offsets[:, None] + pos[None, :]).ravel()
        pos.setflags(write=False)
        cache[key] = pos
    return cache[key]


def _copy_count(stages, base, K):
    return math.prod(int(c) for c in stages.cuts[base:K])


def _log_copy_counts(stages, base):
    # log of the number of stage-``base`` copies inside stage K, indexed by K
    key = ("logcount", base)
    cache = _cache(stages)
    if key not in cache:
        logs = np.zeros(stages.max_stage + 1)
        logs[base + 1 :] = np.cumsum(np.log(stages.cuts[base : stages.max_stage].astype(float)))
        cache[key] = logs
    return cache[key]


def lift_intervals(stages, intervals, stage, target):
    """Height intervals of a full-width set re-expressed at a deeper stage."""
    intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if target == stage:
        return intervals
    pos = level_positions(stages, stage, target)
    out = (pos[:, None, None] + intervals[None, :, :]).reshape(-1, 2)
    return out


def _window_pairs(P, src, shift, h0):
    """All ``(s, p)`` with ``s`` in ``src``, ``p`` in sorted ``P`` and ``|shift + s - p| < h0``.

    ``src`` and ``shift`` broadcast against each other; returns flat arrays of
    shifts and of indices into the broadcast source.
    """
    q = (src + shift).ravel()
    lo = np.searchsorted(P, q - h0, side="right")
    hi = np.searchsorted(P, q + h0, side="left")
    sh, idx = [], []
    k = 0
    while True:
        j = lo + k
        m = j < hi
        if not m.any():
            break
        sh.append(q[m] - P[j[m]])
        idx.append(np.flatnonzero(m))
        k += 1
    if not sh:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(sh), np.concatenate(idx)


def _first_stages(stages, values, base):
    """Smallest stages ``K >= base`` with ``h_K >= values`` (vectorised)."""
    values = np.asarray(values, dtype=float)
    # heights are non-decreasing, so a left search finds the first h_K >= value
    Ks = np.searchsorted(stages.heights[1:], values, side="left") + 1
    Ks = np.maximum(Ks, base)
    if len(Ks) and Ks.max() > stages.max_stage:
        bad = float(values[np.argmax(Ks)])
        raise DepthExhausted(
            f"t={bad!r} exceeds the height of the deepest stage {stages.max_stage}",
            max_safe_time=float(stages.heights[stages.max_stage]),
        )
    return Ks.astype(np.int64)


def breakpoint_edges(intervals, base_height):
    """Cell edges between which every overlap ``|E_a & (E_b - s)|`` is linear in ``s``.

    The edges are the differences of interval endpoints together with
    ``+-base_height``; the set is symmetric about zero.
    """
    flat = np.concatenate([np.asarray(iv, dtype=float).reshape(-1, 2) for iv in intervals])
    ends = np.unique(flat.ravel())
    diffs = (ends[:, None] - ends[None, :]).ravel()
    h0 = float(base_height)
    # a - b and b - a are exact negatives in floating point, so the set is symmetric
    edges = np.unique(np.concatenate((diffs, [-h0, h0])))
    return edges[(edges >= -h0) & (edges <= h0)]


def compress_pairs(pairs: PairList, edges) -> PairList:
    """Equivalent pair list with weights only at ``edges``.

    Inside a cell ``[e_c, e_{c+1})`` the ramp sums used by
    :func:`evaluate_pairs` depend on the pairs only through their total weight
    and first moment, which two pairs at the cell ends reproduce exactly.
    Shifts below the first edge never contribute and are dropped; shifts at or
    above the last edge are kept as they are.
    """
    edges = np.asarray(edges, dtype=float)
    s, w = pairs.shifts, pairs.weights
    cell = np.searchsorted(edges, s, side="right") - 1
    inside = (cell >= 0) & (cell < len(edges) - 1)
    ncell = len(edges) - 1
    W = np.bincount(cell[inside], weights=w[inside], minlength=ncell)
    S = np.bincount(cell[inside], weights=(w * s)[inside], minlength=ncell)
    weights, shifts = _edge_pairs(W, S, edges)
    above = cell >= len(edges) - 1
    return PairList(
        np.concatenate((weights, w[above])), np.concatenate((shifts, s[above])), pairs.bound, pairs.stage_used
    )


def _edge_pairs(W, S, edges):
    # per cell: alpha at the left edge and beta at the right edge with
    # alpha + beta = W and alpha e_c + beta e_{c+1} = S
    beta = (S - W * edges[:-1]) / np.diff(edges)
    alpha = W - beta
    weights = np.zeros(len(edges))
    weights[:-1] += alpha
    weights[1:] += beta
    keep = weights != 0
    return weights[keep], edges[keep].copy()


def _exact_batch(stages, base, K, taus, weights, edges=None):
    """Exact lifting for non-negative ``taus`` that share the lifting stage ``K``."""
    P = level_positions(stages, base, K)
    h0 = float(stages.heights[base])
    hK = float(stages.heights[K])
    wK = float(stages.widths[K])
    n = len(P)
    out_w, out_s = [], []
    bound = 0.0
    deepest = K
    for start in range(0, len(taus), max(1, _CHUNK // n)):
        tau = taus[start : start + max(1, _CHUNK // n)]
        wt = weights[start : start + len(tau)]
        sh, idx = _window_pairs(P, P[None, :], tau[:, None], h0)
        out_s.append(sh)
        out_w.append(wt[idx // n] * wK)

        # orbits leaving the top of stage K, resolved through later columns
        H = np.full(len(tau), hK)
        width = wK
        k = K
        src = P[None, :] + h0 + tau[:, None] > H[:, None]
        while src.any():
            gap = np.clip(tau - (H - hK), 0.0, None)
            leak = np.abs(wt) * width * gap
            stop = src.any(axis=1) & ((leak < LEAK_TOL) | (k > stages.max_stage))
            if stop.any():
                bound += math.fsum(leak[stop])
                src[stop] = False
                if not src.any():
                    break
            st = stages.stage(k)
            rows, cols = np.nonzero(src)
            width_next = width / st.cuts
            # all spacer columns of this stage at once: shape (sources, r_k - 1)
            shift = (tau[rows] - H[rows])[:, None] - st.spacers.values[None, :-1]
            sh, idx = _window_pairs(P, P[cols][:, None], shift, h0)
            out_s.append(sh)
            out_w.append(wt[rows[idx // (st.cuts - 1)]] * width_next)
            deepest = max(deepest, k)
            H = H + st.spacers.values[-1]
            width = width_next
            k += 1
            src = src & (P[None, :] + h0 + tau[:, None] > H[:, None])
    pl = PairList(np.concatenate(out_w), np.concatenate(out_s), bound, deepest)
    return pl if edges is None else compress_pairs(pl, edges)


def _exact_many(stages, base, taus, weights, edges=None):
    """Exact lifting for arbitrary real ``taus`` (grouped by sign and lifting stage)."""
    taus = np.asarray(taus, dtype=float)
    weights = np.asarray(weights, dtype=float)
    mags = np.abs(taus)
    Ks = _first_stages(stages, mags, base)
    out = []
    for negative in (False, True):
        for K in np.unique(Ks):
            sel = (Ks == K) & ((taus < 0) == negative)
            if not sel.any():
                continue
            pl = _exact_batch(stages, base, int(K), mags[sel], weights[sel], edges)
            # M(-t) = M(t)^T: the same pairs with negated shifts
            out.append(pl.negated() if negative else pl)
    return PairList.concat(out)


def _column_terms(stages, R, k, u, weight=1.0):
    """Column-pair terms of ``M(k h_R + u)`` for ``0 <= k <= r_R``.

    Returns ``(c, w, bound, deepest)``: the restricted stage-``R``
    correlations at shifts ``c + u`` with relative weights ``w`` (to be
    replaced by true correlations ``M(c + u)``), the error bound of that
    replacement plus the dropped pairs, relative to one unit of ``weight``, and
    the deepest stage used.  ``c`` does not depend on ``u``, so terms of nearby
    times can be matched exactly.
    """
    if R + 1 > stages.max_stage:
        raise DepthExhausted(
            f"time {k}h{R}{u:+g} needs stage {R + 1} beyond max stage {stages.max_stage}",
            max_safe_time=float(stages.heights[stages.max_stage]),
        )
    st = stages.stage(R)
    r = st.cuts
    hR = float(st.height)
    wR = float(st.width)
    cs = np.concatenate(([0.0], np.cumsum(st.spacers.values)))  # cs[i-1] = sum_{l<i} s_R(l)
    S_R = cs[-1]
    if not 0 <= k <= r:
        raise ParameterError(f"multiple {k} of h{R} outside 0..{r}")
    cols = np.arange(1, r + 1)

    near_c, near_w = [], []
    bound = 0.0

    def add_pairs(base0, n_offset, rel_weight, src_cols):
        # pairs (i, i') with stage-R shift (n_offset + i - i') h_R + base0 + u + cs_i - cs_i'
        nonlocal bound
        base0 = np.atleast_1d(np.asarray(base0, dtype=float))
        i = src_cols
        for dn in (0, -1, 1):
            ip = i + n_offset - dn  # leaves n = dn multiples of h_R
            ok = (ip >= 1) & (ip <= r)
            if not ok.any():
                continue
            c = (base0[:, None] + (cs[i[ok] - 1] - cs[ip[ok] - 1])[None, :]).ravel()
            rho = c + u
            if dn == 0:
                inside = np.abs(rho) < hR
                near = inside & (np.abs(rho) <= hR / 2)
                far = inside & ~near
                near_c.append(c[near])
                near_w.append(np.full(int(near.sum()), rel_weight))
                bound += rel_weight * wR * (math.fsum(np.abs(rho[near])) + math.fsum(hR - np.abs(rho[far])))
            else:
                # the stage-R shift is dn h_R + rho: only the sliver next to +-h_R overlaps
                gap = -dn * rho
                bound += rel_weight * wR * math.fsum(np.minimum(gap[gap > 0], hR))

    # both copies in the same stage R+1 tower
    add_pairs(0.0, k, 1.0 / r, cols)

    # orbits leaving the top of stage R+1, resolved through later columns
    rel = 1.0 / r
    extra = 0.0  # accumulated top spacers above the stage-R copies
    kst = R + 1
    deepest = R + 1
    # column i has points with y + t >= H  iff  (i + k - r) h_R + cs_i + u - S_R - extra > 0
    src = (cols + k - r) * hR + (cs[:-1] + u - S_R - extra) > 0
    while src.any():
        leak = rel * wR * max(k * hR + u - extra, 0.0)
        if kst > stages.max_stage or abs(weight) * leak < LEAK_TOL:
            bound += leak
            break
        nxt = stages.stage(kst)
        rel_next = rel / nxt.cuts
        add_pairs(-S_R - extra - nxt.spacers.values[:-1], k - r, rel_next, cols[src])
        deepest = max(deepest, kst)
        extra += float(nxt.spacers.values[-1])
        rel = rel_next
        kst += 1
        src = src & ((cols + k - r) * hR + (cs[:-1] + u - S_R - extra) > 0)

    c = np.concatenate(near_c) if near_c else np.zeros(0)
    w = np.concatenate(near_w) if near_w else np.zeros(0)
    # identical shifts come from identical column pairs in different copies
    if len(c):
        c, inv = np.unique(c, return_inverse=True)
        w = np.bincount(inv, weights=w)
    return c, w, bound, deepest


def _renormalized(stages, base, R, k, u, weight, budget, depth, edges=None):
    """Expansion of ``M(k h_R + u)`` (``k >= 0``) through the columns of stage ``R``."""
    c, w, bound, deepest = _column_terms(stages, R, k, u, weight)
    child = _expand(stages, base, c + u, w * weight, budget, depth + 1, edges)
    # child weights are absolute; the restricted stage-R correlation is the
    # true one divided by w_R, times the absolute pair width rel * w_R
    return PairList(child.weights, child.shifts, child.bound + abs(weight) * bound, max(deepest, child.stage_used))


def _expand(stages, base, taus, weights, budget, depth=0, edges=None):
    """Pair list of ``sum_k weights[k] * M(taus[k])`` (float times)."""
    taus = np.asarray(taus, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if len(taus) == 0:
        return PairList(np.zeros(0), np.zeros(0), 0.0, base)
    if depth > 64:
        raise RuntimeError("renormalisation did not terminate")
    mags = np.abs(taus)
    Ks = _first_stages(stages, mags, base)
    exact = _log_copy_counts(stages, base)[Ks] <= math.log(budget) + 1e-9
    parts = []
    if exact.any():
        parts.append(_exact_many(stages, base, taus[exact], weights[exact], edges))
    for idx in np.flatnonzero(~exact):
        R = int(Ks[idx]) - 1
        hR = float(stages.heights[R])
        k = int(mags[idx] // hR)
        u = float(mags[idx] - k * hR)
        pl = _renormalized(stages, base, R, k, u, float(weights[idx]), budget, depth, edges)
        parts.append(pl.negated() if taus[idx] < 0 else pl)
    pl = PairList.concat(parts)
    return pl if edges is None else compress_pairs(pl, edges)


def pair_expansion(stages, base, t, budget=DEFAULT_COPY_BUDGET, edges=None) -> PairList:
    """Pair list of ``M(t)`` for level sets of stage ``base`` (areas, unnormalised).

    With ``edges`` (see :func:`breakpoint_edges`) the list is returned in
    compressed form, exact for interval sets whose breakpoints are among the
    edges and much cheaper to build for large ``t``.
    """
    t = as_time(t)
    if isinstance(t, StageTime):
        if t.stage > stages.max_stage:
            raise DepthExhausted(f"time {t} refers to stage {t.stage} beyond {stages.max_stage}")
        value = time_value(stages, t)
        K = stages.first_stage_at_least(abs(value), start=base) if math.isfinite(value) else None
        if K is not None and _copy_count(stages, base, K) <= budget:
            return _expand(stages, base, [value], [1.0], budget, edges=edges)
        sign = -1 if (t.multiple < 0 or (t.multiple == 0 and t.offset < 0)) else 1
        k, u = sign * t.multiple, sign * t.offset
        R = t.stage
        if t.stage < base or k == 0 or k > stages.cuts[R] or R + 1 > stages.max_stage:
            return _expand(stages, base, [value], [1.0], budget, edges=edges)
        pl = _renormalized(stages, base, R, k, u, 1.0, budget, 0, edges)
        return pl.negated() if sign < 0 else pl
    return _expand(stages, base, [t], [1.0], budget, edges=edges)


def pair_expansions(stages, base, times, weights=None, budget=DEFAULT_COPY_BUDGET, edges=None) -> PairList:
    """Pair list of ``sum_k weights[k] M(times[k])`` for float times, batched."""
    times = np.asarray(times, dtype=float)
    weights = np.ones_like(times) if weights is None else np.asarray(weights, dtype=float)
    return _expand(stages, base, times, weights, budget, edges=edges)


def evaluate_pairs(pairs: PairList, intervals) -> np.ndarray:
    """Matrix ``sum_k w_k |E_a & (E_b - s_k)|`` for sets given as interval lists.

    Uses the ramp identity ``|[l,u) & [l',u')| = R(u-l') - R(u-u') - R(l-l') + R(l-u')``
    with ``R(x) = max(x, 0)``.  Every ramp is evaluated at a difference of
    interval endpoints, so the pairs only need to be binned between those
    breakpoints (weight and first moment per bin); no sort of the pair list
    is required.
    """
    n = len(intervals)
    if len(pairs.shifts) == 0 or n == 0:
        return np.zeros((n, n))
    lows = [np.asarray(iv, dtype=float).reshape(-1, 2) for iv in intervals]
    sizes = [len(iv) for iv in lows]
    flat = np.concatenate(lows)
    owner = np.repeat(np.arange(n), sizes)
    l, u = flat[:, 0], flat[:, 1]
    xs = np.stack([u[:, None] - l[None, :], u[:, None] - u[None, :], l[:, None] - l[None, :], l[:, None] - u[None, :]])
    # sum_k w_k max(s_k + x, 0) = sum over s_k > b of w_k (s_k - b), with b = -x
    bps, where = np.unique(-xs, return_inverse=True)
    cell = np.searchsorted(bps, pairs.shifts, side="left")  # number of breakpoints below s_k
    W = np.bincount(cell, weights=pairs.weights, minlength=len(bps) + 1)
    S = np.bincount(cell, weights=pairs.weights * pairs.shifts, minlength=len(bps) + 1)
    tail_w = np.cumsum(W[::-1])[::-1][1:]  # tail_w[i] = sum of W over cells > i
    tail_s = np.cumsum(S[::-1])[::-1][1:]
    ramp = (tail_s - bps * tail_w)[where.reshape(xs.shape)]
    vals = ramp[0] - ramp[1] - ramp[2] + ramp[3]
    out = np.zeros((n, n))
    np.add.at(out, (owner[:, None].repeat(len(flat), 1), owner[None, :].repeat(len(flat), 0)), vals)
    return out


# ---------------------------------------------------------------------------
# windows of nearby times
# ---------------------------------------------------------------------------

_WINDOW_SPAN = 16.0  # in units of the base height; wider sample sets are split


@dataclass(frozen=True)
class WindowExpansion:
    """Compressed pair lists of ``M(t_m)`` for a set of sample times.

    ``weights[m]`` holds the pair weights of sample ``m`` at the shifts
    ``edges``; ``bounds[m]`` is its error bound (areas).
    """

    edges: np.ndarray
    weights: np.ndarray
    bounds: np.ndarray
    stage_used: int

    def pairs(self, m) -> PairList:
        return PairList(self.weights[m], self.edges, float(self.bounds[m]), self.stage_used)

    def total(self, weights=None) -> PairList:
        """Pair list of ``sum_m weights[m] M(t_m)``."""
        c = np.ones(len(self.weights)) if weights is None else np.asarray(weights, dtype=float)
        return PairList(c @ self.weights, self.edges, float(np.abs(c) @ self.bounds), self.stage_used)

    def evaluate(self, intervals) -> np.ndarray:
        """Matrices of every sample, shape ``(samples, n, n)``."""
        return evaluate_edge_weights(self.edges, self.weights, intervals)


class _Accumulator:
    def __init__(self, n, edges):
        self.edges = edges
        self.weights = np.zeros((n, len(edges)))
        self.bounds = np.zeros(n)
        self.deepest = 0



def _moments_to_edges(W, S, edges):
    # row-wise version of _edge_pairs without dropping zeros
    beta = (S - W * edges[:-1]) / np.diff(edges)
    out = np.zeros((W.shape[0], len(edges)))
    out[:, :-1] += W - beta
    out[:, 1:] += beta
    return out


_GROUPS_PER_BIN = 512


def _window_superset(stages, base, K, taus, wts, grp):
    """Level pairs covering every sample of each window of non-negative times.

    Returns shifts ``z`` relative to each window's centre ``tc[g]``, unit
    pair weights, window ids, the centres, per-sample leak bounds and the
    deepest stage used.
    """
    P = level_positions(stages, base, K)
    n = len(P)
    h0 = float(stages.heights[base])
    hK = float(stages.heights[K])
    wK = float(stages.widths[K])
    G = int(grp.max()) + 1
    lo = np.full(G, np.inf)
    hi = np.full(G, -np.inf)
    np.minimum.at(lo, grp, taus)
    np.maximum.at(hi, grp, taus)
    tc = 0.5 * (lo + hi)
    reach = h0 + 0.5 * float((hi - lo).max())
    zs, ws, gs = [], [], []
    sh, idx = _window_pairs(P, P[None, :], tc[:, None], reach)
    zs.append(sh)
    ws.append(np.full(len(sh), wK))
    gs.append(idx // n)

    bounds = np.zeros(len(taus))
    H = hK
    width = wK
    k = K
    deepest = K
    src = P[None, :] + h0 + hi[:, None] > H
    while src.any():
        leak = np.abs(wts) * width * np.clip(taus - (H - hK), 0.0, None)
        worst = np.zeros(G)
        np.maximum.at(worst, grp, leak)
        stop = src.any(axis=1) & ((worst < LEAK_TOL) | (k > stages.max_stage))
        if stop.any():
            done = stop[grp]
            bounds[done] += leak[done]
            src[stop] = False
            if not src.any():
                break
        st = stages.stage(k)
        width_next = width / st.cuts
        rows, cols = np.nonzero(src)
        shift = (tc[rows] - H)[:, None] - st.spacers.values[None, :-1]
        sh, idx = _window_pairs(P, P[cols][:, None], shift, reach)
        zs.append(sh)
        ws.append(np.full(len(sh), width_next))
        gs.append(rows[idx // (st.cuts - 1)])
        deepest = max(deepest, k)
        H += float(st.spacers.values[-1])
        width = width_next
        k += 1
        src &= P[None, :] + h0 + hi[:, None] > H

    return np.concatenate(zs), np.concatenate(ws), np.concatenate(gs), tc, reach, bounds, deepest


def _exact_windows(stages, base, K, taus, wts, grp, edges):
    """Weighted edge arrays of ``M(taus[m])`` for non-negative ``taus`` lifting at ``K``.

    Samples are grouped into windows of nearby times (``grp``).  One superset
    of level pairs is generated per window and sorted once; every sample is
    then binned by shifting the cell edges.  Returns the edge arrays, the
    per-sample error bounds and the deepest stage used.
    """
    z, w, g, tc, reach, bounds, deepest = _window_superset(stages, base, K, taus, wts, grp)
    G = len(tc)
    order = np.lexsort((z, g))
    z, w, g = z[order], w[order], g[order]
    starts = np.searchsorted(g, np.arange(G + 1), side="left")
    out = np.zeros((len(taus), len(edges)))
    delta = taus - tc[grp]
    span = 4.0 * reach
    for g0 in range(0, G, _GROUPS_PER_BIN):
        g1 = min(G, g0 + _GROUPS_PER_BIN)
        a, b = starts[g0], starts[g1]
        # windows side by side on one axis, far enough apart not to mix
        key = (g[a:b] - g0) * span + z[a:b]
        cw = np.concatenate(([0.0], np.cumsum(w[a:b], dtype=np.longdouble)))
        cz = np.concatenate(([0.0], np.cumsum(w[a:b] * z[a:b], dtype=np.longdouble)))
        sel = np.flatnonzero((grp >= g0) & (grp < g1))
        q = (grp[sel] - g0)[:, None] * span + edges[None, :] - delta[sel][:, None]
        idx = np.searchsorted(key, q, side="left")
        Wc = np.diff(cw[idx], axis=1).astype(float)
        Sc = np.diff(cz[idx], axis=1).astype(float) + delta[sel][:, None] * Wc
        out[sel] = _moments_to_edges(Wc * wts[sel][:, None], Sc * wts[sel][:, None], edges)
    return out, bounds, deepest


def _window_families(stages, base, taus, wts, rows, gid, budget, depth, acc, flip):
    """Add ``wts[m] M(taus[m])`` to accumulator rows ``rows[m]``.

    Samples with equal ``gid`` are nearby times and share their lifting work.
    """
    if depth > 64:
        raise RuntimeError("renormalisation did not terminate")
    live = wts != 0
    taus, wts, rows, gid = taus[live], wts[live], rows[live], gid[live]
    if not len(taus):
        return
    h0 = float(stages.heights[base])
    mags = np.abs(taus)
    Ks = _first_stages(stages, mags, base)
    exact = _log_copy_counts(stages, base)[Ks] <= math.log(budget) + 1e-9
    negative = taus < 0
    for neg in (False, True):
        sel = np.flatnonzero(exact & (negative == neg))
        if len(sel):
            # windows of bounded span, each lifted at the stage of its largest time
            _, g = np.unique(gid[sel], return_inverse=True)
            low = np.full(g.max() + 1, np.inf)
            np.minimum.at(low, g, mags[sel])
            piece = np.floor((mags[sel] - low[g]) / (_WINDOW_SPAN * h0)).astype(np.int64)
            _, g = np.unique(np.stack((g, piece), axis=1), axis=0, return_inverse=True)
            g = g.ravel()
            Kg = np.zeros(g.max() + 1, dtype=np.int64)
            np.maximum.at(Kg, g, Ks[sel])
            for K in np.unique(Kg):
                s_in = Kg[g] == K
                s = sel[s_in]
                _, local = np.unique(g[s_in], return_inverse=True)
                A, b, d = _exact_windows(stages, base, int(K), mags[s], wts[s], local.ravel(), acc.edges)
                if flip ^ neg:
                    # negating every shift maps the symmetric edge set onto itself reversed
                    A = A[:, ::-1]
                np.add.at(acc.weights, rows[s], A)
                np.add.at(acc.bounds, rows[s], b)
                acc.deepest = max(acc.deepest, d)
        far = np.flatnonzero(~exact & (negative == neg))
        if len(far):
            R = Ks[far] - 1
            hR = stages.heights[R].astype(float)
            k = np.floor(mags[far] / hR).astype(np.int64)
            for key in np.unique(np.stack((R, k), axis=1), axis=0):
                s = far[(R == key[0]) & (k == key[1])]
                us = mags[s] - key[1] * float(stages.heights[key[0]])
                _window_renormalized(stages, base, int(key[0]), int(key[1]), us, wts[s], rows[s], budget, depth, acc, flip ^ neg)


def _exact_shared(stages, base, K, tc, sgn, a, delta, b, edges):
    """Edge arrays of ``sum_g a[g] b[m] M(sgn[g] (tc[g] + sgn[g] delta[m]))``.

    Every window ``g`` is sampled at the same offsets ``delta`` (times keep
    the sign ``sgn[g]`` throughout) so all level pairs can be merged into one
    sorted list that each sample bins once.
    """
    P = level_positions(stages, base, K)
    n = len(P)
    h0 = float(stages.heights[base])
    hK = float(stages.heights[K])
    wK = float(stages.widths[K])
    reach = h0 + float(np.abs(delta).max())
    taus = tc[:, None] + sgn[:, None] * delta[None, :]  # (windows, samples), all >= 0
    hi = taus.max(axis=1)
    ys, ws = [], []
    sh, idx = _window_pairs(P, P[None, :], tc[:, None], reach)
    g = idx // n
    ys.append(sgn[g] * sh)
    ws.append(a[g] * wK)

    bounds = np.zeros(len(delta))
    H = hK
    width = wK
    k = K
    deepest = K
    src = P[None, :] + h0 + hi[:, None] > H
    weight = np.abs(a)[:, None] * np.abs(b)[None, :]
    while src.any():
        active = src.any(axis=1)
        leak = weight[active] * width * np.clip(taus[active] - (H - hK), 0.0, None)
        stop = np.zeros(len(tc), dtype=bool)
        stop[active] = (leak.max(axis=1) < LEAK_TOL) | (k > stages.max_stage)
        if stop.any():
            bounds += leak[stop[active]].sum(axis=0)
            src[stop] = False
            if not src.any():
                break
        st = stages.stage(k)
        width_next = width / st.cuts
        rows, cols = np.nonzero(src)
        shift = (tc[rows] - H)[:, None] - st.spacers.values[None, :-1]
        sh, idx = _window_pairs(P, P[cols][:, None], shift, reach)
        g = rows[idx // (st.cuts - 1)]
        ys.append(sgn[g] * sh)
        ws.append(a[g] * width_next)
        deepest = max(deepest, k)
        H += float(st.spacers.values[-1])
        width = width_next
        k += 1
        src &= P[None, :] + h0 + hi[:, None] > H

    y = np.concatenate(ys)
    w = np.concatenate(ws)
    order = np.argsort(y, kind="stable")
    y, w = y[order], w[order]
    cw = np.concatenate(([0.0], np.cumsum(w, dtype=np.longdouble)))
    cy = np.concatenate(([0.0], np.cumsum(w * y, dtype=np.longdouble)))
    idx = np.searchsorted(y, edges[None, :] - delta[:, None], side="left")
    Wc = np.diff(cw[idx], axis=1).astype(float)
    Sc = np.diff(cy[idx], axis=1).astype(float) + delta[:, None] * Wc
    return _moments_to_edges(Wc * b[:, None], Sc * b[:, None], edges), bounds, deepest


def _window_renormalized(stages, base, R, k, us, wts, rows, budget, depth, acc, flip):
    """Add ``wts[m] M(k h_R + us[m])`` through the columns of stage ``R``."""
    cs_all, w_all, owner = [], [], []
    for m in range(len(us)):
        c, w, bound, deepest = _column_terms(stages, R, k, float(us[m]), float(wts[m]))
        acc.bounds[rows[m]] += abs(wts[m]) * bound
        acc.deepest = max(acc.deepest, deepest)
        cs_all.append(c)
        w_all.append(w)
        owner.append(np.full(len(c), m))
    c = np.concatenate(cs_all)
    w = np.concatenate(w_all)
    owner = np.concatenate(owner)
    # children M(c + u_m) with the same c form a window of nearby times
    uc, gid = np.unique(c, return_inverse=True)
    gid = gid.ravel()
    G, U = len(uc), len(us)
    count = np.bincount(gid, minlength=G)
    wmin = np.full(G, np.inf)
    wmax = np.full(G, -np.inf)
    np.minimum.at(wmin, gid, w)
    np.maximum.at(wmax, gid, w)
    # windows present in every sample with one relative weight share all their work
    shared = (count == U) & (wmin == wmax)
    if U > 1 and shared.any():
        mid = 0.5 * (us.min() + us.max())
        delta = us - mid
        lo = uc + us.min()
        hi = uc + us.max()
        h0 = float(stages.heights[base])
        ok = shared & ((lo >= 0) | (hi < 0))
        mag = np.maximum(np.abs(lo), np.abs(hi))
        Kg = np.zeros(G, dtype=np.int64)
        Kg[ok] = _first_stages(stages, mag[ok], base)
        ok &= _log_copy_counts(stages, base)[Kg] <= math.log(budget) + 1e-9
        ok &= (hi - lo) <= _WINDOW_SPAN * h0
        for K in np.unique(Kg[ok]):
            sel = np.flatnonzero(ok & (Kg == K))
            sgn = np.where(lo[sel] >= 0, 1.0, -1.0)
            A, bnd, d = _exact_shared(stages, base, int(K), sgn * (uc[sel] + mid), sgn, wmin[sel], delta, wts, acc.edges)
            np.add.at(acc.weights, rows, A[:, ::-1] if flip else A)
            np.add.at(acc.bounds, rows, bnd)
            acc.deepest = max(acc.deepest, d)
        rest = ~ok[gid]
    else:
        rest = np.ones(len(c), dtype=bool)
    m = owner[rest]
    _window_families(stages, base, c[rest] + us[m], w[rest] * wts[m], rows[m], gid[rest], budget, depth + 1, acc, flip)


def window_expansion(stages, base, center, offsets, edges, budget=DEFAULT_COPY_BUDGET) -> WindowExpansion:
    """Compressed pair lists of ``M(center + offsets[m])`` for every offset.

    ``center`` may be a :class:`StageTime`, whose offsets then stay exact even
    when ``h_j`` dwarfs them.  Sharing the lifting work across nearby times
    makes a window of samples cost little more than a single time.
    """
    t = as_time(center)
    offsets = np.atleast_1d(np.asarray(offsets, dtype=float))
    edges = np.asarray(edges, dtype=float)
    acc = _Accumulator(len(offsets), edges)
    rows = np.arange(len(offsets))
    ones = np.ones(len(offsets))
    renorm = False
    if isinstance(t, StageTime):
        if t.stage > stages.max_stage:
            raise DepthExhausted(f"time {t} refers to stage {t.stage} beyond {stages.max_stage}")
        value = time_value(stages, t)
        sign = -1 if (t.multiple < 0 or (t.multiple == 0 and t.offset < 0)) else 1
        k = sign * t.multiple
        renorm = (
            t.stage >= base
            and 1 <= k <= stages.cuts[t.stage]
            and t.stage + 1 <= stages.max_stage
            and _log_copy_counts(stages, base)[t.stage + 1] > math.log(budget) + 1e-9
        )
    else:
        value = float(t)
    if renorm:
        us = sign * (t.offset + offsets)
        _window_renormalized(stages, base, t.stage, k, us, ones, rows, budget, 0, acc, sign < 0)
    else:
        _window_families(stages, base, value + offsets, ones, rows, np.zeros(len(offsets), dtype=np.int64), budget, 0, acc, False)
    return WindowExpansion(edges, acc.weights, acc.bounds, max(acc.deepest, base))


def evaluate_edge_weights(edges, weights, intervals) -> np.ndarray:
    """Matrices ``sum_e weights[m, e] |E_a & (E_b - edges[e])|`` for every row ``m``."""
    weights = np.atleast_2d(weights)
    n = len(intervals)
    if n == 0:
        return np.zeros((len(weights), 0, 0))
    lows = [np.asarray(iv, dtype=float).reshape(-1, 2) for iv in intervals]
    flat = np.concatenate(lows)
    owner = np.repeat(np.arange(n), [len(iv) for iv in lows])
    l, u = flat[:, 0], flat[:, 1]
    xs = np.stack([u[:, None] - l[None, :], u[:, None] - u[None, :], l[:, None] - l[None, :], l[:, None] - u[None, :]])
    bps, where = np.unique(-xs, return_inverse=True)
    ramp = weights @ np.maximum(edges[:, None] - bps[None, :], 0.0)  # (rows, breakpoints)
    r = ramp[:, where.reshape(xs.shape)]
    vals = r[:, 0] - r[:, 1] - r[:, 2] + r[:, 3]
    out = np.zeros((len(weights), n * n))
    flat_idx = (owner[:, None] * n + owner[None, :]).ravel()
    for m in range(len(weights)):
        out[m] = np.bincount(flat_idx, weights=vals[m].ravel(), minlength=n * n)
    return out.reshape(len(weights), n, n)


def _overlap_terms(intervals):
    # breakpoints b, their signs and owners for the ramp identity
    n = len(intervals)
    lows = [np.asarray(iv, dtype=float).reshape(-1, 2) for iv in intervals]
    flat = np.concatenate(lows)
    owner = np.repeat(np.arange(n), [len(iv) for iv in lows])
    l, u = flat[:, 0], flat[:, 1]
    xs = np.stack([u[:, None] - l[None, :], u[:, None] - u[None, :], l[:, None] - l[None, :], l[:, None] - u[None, :]])
    bps, where = np.unique(-xs, return_inverse=True)
    flat_idx = (owner[:, None] * n + owner[None, :]).ravel()
    return bps, where.reshape(xs.shape), flat_idx


def average_matrix(stages, base, a, intervals) -> tuple:
    """Exact ``(1/a) int_0^a sum_k w_k |E_a & (E_b - s_k(s))| ds`` over level sets of stage ``base``.

    Every overlap is piecewise linear in the shift, so its time integral is a
    difference of integrated ramps ``Q(x) = max(x, 0)**2 / 2``; no quadrature
    is involved.  Returns the (unnormalised) matrix and its error bound.
    """
    a = float(a)
    taus = np.array([0.0, a])
    K = int(_first_stages(stages, [a], base)[0])
    z, w, _, tc, _, bounds, _ = _window_superset(stages, base, K, taus, np.ones(2), np.zeros(2, dtype=np.int64))
    # shifts run over z + (s - a/2) for s in [0, a]
    bps, where, flat_idx = _overlap_terms(intervals)
    lo = z[None, :] - 0.5 * a - bps[:, None]
    hi = z[None, :] + 0.5 * a - bps[:, None]
    Q = lambda x: 0.5 * np.maximum(x, 0.0) ** 2
    ramp = ((Q(hi) - Q(lo)) @ w) / a
    r = ramp[where]
    vals = r[0] - r[1] - r[2] + r[3]
    n = len(intervals)
    M = np.bincount(flat_idx, weights=vals.ravel(), minlength=n * n).reshape(n, n)
    return M, float(bounds.max())
