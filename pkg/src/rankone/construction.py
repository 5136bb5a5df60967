"""Cutting-and-stacking recipes and the stage hierarchy they generate.

A rank-one flow is specified by an initial height ``h1``, a cut sequence
``r_j`` and spacer vectors ``s_j``.  Stage ``j`` is a rectangle of width
``w_j`` and height ``h_j`` on which the flow moves points straight up.  Stage
``j + 1`` is obtained by cutting stage ``j`` into ``r_j`` columns, putting
``s_j(i)`` units of spacer on top of column ``i`` and stacking the columns
left to right::

    h_{j+1} = r_j h_j + sum_i s_j(i),      w_{j+1} = w_j / r_j

The base width is normalised to ``w_1 = 1``; the probability measure is the
area divided by the (estimated) limiting total area ``m_inf``.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import ParameterError, StageDepthError

__all__ = [
    "Family",
    "ConstructionParams",
    "SpacerVector",
    "Stage",
    "StageHierarchy",
    "default_schedule",
    "spacer_value",
    "spacer_vector",
    "build_stages",
    "tail_mass_bound",
    "stage_table_csv",
]


class Family(enum.Enum):
    FEPS = "FEps"
    SLOW_MIX = "SlowMix"
    STAIRCASE = "Staircase"
    ODOMETER = "OdometerControl"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for member in cls:
            if member.value.lower() == str(name).strip().lower():
                return member
        choices = ", ".join(m.value for m in cls)
        raise ParameterError(f"family: unknown family {name!r} (expected one of {choices})")


def default_schedule(max_stage, eps0=0.5, first_block=16):
    """Piecewise-constant epsilon schedule: halve epsilon, double block length.

    Returns a tuple of ``(block_length, value)`` pairs covering at least
    ``max_stage`` stages.
    """
    blocks = []
    covered, length, value = 0, int(first_block), float(eps0)
    while covered < max_stage:
        blocks.append((length, value))
        covered += length
        length *= 2
        value /= 2
    return tuple(blocks)


@dataclass(frozen=True)
class ConstructionParams:
    """Generative recipe for one rank-one flow.

    ``eps`` is used by ``FEps``; ``eps_schedule`` (a sequence of
    ``(block_length, value)`` pairs) by ``SlowMix``.  A ``SlowMix`` recipe
    without a schedule gets :func:`default_schedule`.
    """

    family: Family
    h1: float = 1.0
    max_stage: int = 20
    eps: float | None = None
    eps_schedule: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        try:
            h1 = float(self.h1)
        except (TypeError, ValueError):
            raise ParameterError(f"h1: expected a positive real, got {self.h1!r}") from None
        if not (math.isfinite(h1) and h1 > 0):
            raise ParameterError(f"h1: expected a positive real, got {self.h1!r}")
        object.__setattr__(self, "h1", h1)
        if int(self.max_stage) != self.max_stage or self.max_stage < 1:
            raise ParameterError(f"max_stage: expected an integer >= 1, got {self.max_stage!r}")
        object.__setattr__(self, "max_stage", int(self.max_stage))

        if self.family is Family.FEPS:
            if self.eps is None:
                raise ParameterError("eps: required for family FEps")
            _check_eps(self.eps, "eps")
            object.__setattr__(self, "eps", float(self.eps))
        elif self.family is Family.SLOW_MIX:
            schedule = self.eps_schedule or default_schedule(self.max_stage)
            blocks = []
            for k, block in enumerate(schedule):
                try:
                    length, value = block
                except (TypeError, ValueError):
                    raise ParameterError(f"eps_schedule: block {k} is not a (length, value) pair") from None
                if int(length) != length or length < 1:
                    raise ParameterError(f"eps_schedule: block {k} has invalid length {length!r}")
                _check_eps(value, f"eps_schedule[{k}]")
                blocks.append((int(length), float(value)))
            values = [v for _, v in blocks]
            if any(b > a for a, b in zip(values, values[1:])):
                raise ParameterError("eps_schedule: values must be non-increasing")
            object.__setattr__(self, "eps_schedule", tuple(blocks))

    def eps_at(self, j):
        """Epsilon used at stage ``j`` (``None`` for families without one)."""
        if self.family is Family.FEPS:
            return self.eps
        if self.family is not Family.SLOW_MIX:
            return None
        start = 1
        for length, value in self.eps_schedule:
            if j < start + length:
                return value
            start += length
        return self.eps_schedule[-1][1]

    def block_ranges(self):
        """Stage ranges ``(first, last)`` of the schedule blocks, clipped to ``max_stage``."""
        out, start = [], 1
        for length, _ in self.eps_schedule:
            if start > self.max_stage:
                break
            out.append((start, min(start + length - 1, self.max_stage)))
            start += length
        if out and out[-1][1] < self.max_stage:
            out[-1] = (out[-1][0], self.max_stage)
        return out

    def as_dict(self):
        d = {"family": self.family.value, "h1": self.h1, "max_stage": self.max_stage}
        if self.eps is not None:
            d["eps"] = self.eps
        if self.eps_schedule:
            d["eps_schedule"] = [list(b) for b in self.eps_schedule]
        return d


def _check_eps(value, name):
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ParameterError(f"{name}: expected a real in (0, 1), got {value!r}") from None
    if not 0.0 < v < 1.0:
        raise ParameterError(f"{name}: expected a real in (0, 1), got {value!r}")


def _first_branch_count(j, eps):
    # number of integers i >= 1 with i <= (1 - eps) j, compared exactly:
    # eps is read as the decimal it prints as, so 0.3 means 3/10
    threshold = (1 - Fraction(repr(float(eps)))) * j
    return max(0, min(j, math.floor(threshold)))


def spacer_value(j, i, eps):
    """Spacer height ``s_j(i)`` of the epsilon family (``r_j = j``).

    ``i / sqrt(j)`` when ``i <= (1 - eps) j``, otherwise
    ``(i - (1 - eps) j) / j**1.5``.
    """
    if int(j) != j or j < 1:
        raise ParameterError(f"j: expected a positive integer, got {j!r}")
    if int(i) != i or not 1 <= i <= j:
        raise ParameterError(f"i: expected an integer in 1..{j}, got {i!r}")
    _check_eps(eps, "eps")
    if i <= _first_branch_count(j, eps):
        return i / math.sqrt(j)
    return (i - (1.0 - eps) * j) / j**1.5


@dataclass(frozen=True)
class SpacerVector:
    stage_index: int
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)

    @property
    def total(self):
        return float(self.values.sum())


def spacer_vector(params, j):
    """Cut count and spacer vector of stage ``j`` for a recipe."""
    fam = params.family
    if fam is Family.ODOMETER:
        return 2, SpacerVector(j, np.zeros(2))
    i = np.arange(1, j + 1, dtype=float)
    if fam is Family.STAIRCASE:
        return j, SpacerVector(j, i)
    eps = params.eps_at(j)
    split = _first_branch_count(j, eps)
    values = np.where(i <= split, i / math.sqrt(j), (i - (1.0 - eps) * j) / j**1.5)
    return j, SpacerVector(j, values)


@dataclass(frozen=True)
class Stage:
    """One level of the tower hierarchy.

    ``column_offsets[i-1]`` is the height at which column ``i`` of this
    stage sits inside stage ``index + 1``; ``added_spacer_mass`` is the area
    of spacer added when stage ``index + 1`` is built.
    """

    index: int
    cuts: int
    height: float
    width: float
    spacers: SpacerVector
    column_offsets: np.ndarray = field(repr=False)
    tower_mass: float
    added_spacer_mass: float

    @property
    def next_height(self):
        return self.height * self.cuts + self.spacers.total

    @property
    def next_width(self):
        return self.width / self.cuts


class StageHierarchy(Sequence):
    """Immutable, 0-indexed sequence of :class:`Stage` objects (stage ``j`` at ``[j-1]``).

    Besides the stages it carries the recipe and the probability
    normalisation ``total_mass`` (``m_inf``) together with the tail estimate
    it includes.
    """

    def __init__(self, params, stages):
        self.params = params
        self._stages = tuple(stages)
        self.heights = np.array([np.nan] + [s.height for s in self._stages])
        self.widths = np.array([np.nan] + [s.width for s in self._stages])
        self.cuts = np.array([0] + [s.cuts for s in self._stages])
        for arr in (self.heights, self.widths, self.cuts):
            arr.setflags(write=False)
        self.tail_bound = tail_mass_bound(self, self.max_stage)
        self.total_mass = self._stages[-1].tower_mass + self.tail_bound

    def __getitem__(self, k):
        return self._stages[k]

    def __len__(self):
        return len(self._stages)

    def __repr__(self):
        return f"StageHierarchy({self.params.family.value}, max_stage={self.max_stage})"

    @property
    def max_stage(self):
        return len(self._stages)

    def stage(self, j) -> Stage:
        if not 1 <= j <= len(self._stages):
            raise ParameterError(f"stage {j} outside 1..{len(self._stages)}")
        return self._stages[j - 1]

    @property
    def tail_fraction(self):
        return self.tail_bound / self.total_mass

    def first_stage_at_least(self, height, start=1):
        """Smallest stage ``J >= start`` with ``h_J >= height`` (``None`` if none)."""
        idx = np.searchsorted(self.heights[1:], height, side="left") + 1
        idx = max(int(idx), start)
        # heights are non-decreasing, but equal heights (r_1 = 1) need the scan
        while idx <= self.max_stage and self.heights[idx] < height:
            idx += 1
        return idx if idx <= self.max_stage else None


def build_stages(params: ConstructionParams) -> StageHierarchy:
    """Build stages ``1..params.max_stage``.

    Raises :class:`StageDepthError` naming the first stage whose height or
    width leaves the normal double range.
    """
    stages = []
    height, width, mass = params.h1, 1.0, params.h1
    tiny = np.finfo(float).tiny
    for j in range(1, params.max_stage + 1):
        cuts, spacers = spacer_vector(params, j)
        with np.errstate(over="ignore"):
            offsets = np.concatenate(([0.0], np.cumsum(height + spacers.values)[:-1]))
        offsets.setflags(write=False)
        next_height = height * cuts + spacers.total
        next_width = width / cuts
        added = next_width * spacers.total
        stages.append(Stage(j, cuts, height, width, spacers, offsets, mass, added))
        if j < params.max_stage and not (math.isfinite(next_height) and next_width >= tiny):
            raise StageDepthError(j + 1)
        # accumulated rather than w*h so the sequence is monotone in floating point
        height, width, mass = next_height, next_width, mass + added
    return StageHierarchy(params, stages)


def tail_mass_bound(stages, J) -> float:
    """Spacer area added from stage ``J`` on.

    Sums ``added_spacer_mass`` over stages ``J..max_stage`` and appends a
    geometric estimate of what later stages would add, using the ratio of the
    last two terms.  The estimate is infinite if that ratio is not below one.
    """
    if not 1 <= J <= len(stages):
        raise ParameterError(f"J: expected 1..{len(stages)}, got {J!r}")
    added = [stages[k].added_spacer_mass for k in range(J - 1, len(stages))]
    total = math.fsum(added)
    last = stages[-1].added_spacer_mass
    if last == 0.0:
        return total
    prev = stages[-2].added_spacer_mass if len(stages) > 1 else 0.0
    if prev <= 0.0 or last >= prev:
        return math.inf
    q = last / prev
    return total + last * q / (1.0 - q)


def stage_table_csv(stages) -> str:
    """Stage table ``j, r_j, h_j, w_j, added_spacer_mass`` as CSV text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["j", "r_j", "h_j", "w_j", "added_spacer_mass"])
    for s in stages:
        writer.writerow([s.index, s.cuts, repr(s.height), repr(s.width), repr(s.added_spacer_mass)])
    return buf.getvalue()
