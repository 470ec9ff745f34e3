"""
Prediction set primitives
Closed intervals, finite unions of intervals, and the order-statistic rank
rules shared by every conformal method
"""
import math
import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Products such as 0.9 * 10 are integers in exact arithmetic but not always in
# floating point; ranks and thresholds are compared with this slack.
RANK_TOLERANCE = 1e-9

EMPTY = 'empty'
FULL_LINE = 'full_line'
UNION = 'union'


class ConformalError(ValueError):
    """Domain error raised by the conformal library"""


def ceil_rank(value: float) -> int:
    """Ceiling that treats values within RANK_TOLERANCE of an integer as that integer"""
    return int(math.ceil(value - RANK_TOLERANCE))


def floor_rank(value: float) -> int:
    """Floor that treats values within RANK_TOLERANCE of an integer as that integer"""
    return int(math.floor(value + RANK_TOLERANCE))


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0 or math.isnan(alpha):
        raise ConformalError(f"alpha must lie in [0, 1], got {alpha}")


@dataclass(frozen=True)
class Interval:
    """Closed interval [lo, hi]; either end may be infinite"""
    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if math.isnan(lo) or math.isnan(hi):
            raise ConformalError("interval endpoints must not be NaN")
        if lo > hi:
            raise ConformalError(f"inverted interval [{lo}, {hi}]; use PredictionSet.empty()")
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def contains(self, y: float) -> bool:
        return self.lo <= y <= self.hi

    def __repr__(self):
        return f"[{self.lo:g}, {self.hi:g}]"


@dataclass(frozen=True)
class PredictionSet:
    """
    A subset of the real line: empty, the whole line, or a union of disjoint
    closed intervals sorted by their left end.

    Build instances with empty(), full_line() or union(); union() merges
    overlapping and touching intervals so the stored form is canonical.
    """
    kind: str
    intervals: Tuple[Interval, ...] = ()

    @classmethod
    def empty(cls) -> 'PredictionSet':
        return cls(EMPTY)

    @classmethod
    def full_line(cls) -> 'PredictionSet':
        return cls(FULL_LINE)

    @classmethod
    def union(cls, intervals: Iterable[Interval]) -> 'PredictionSet':
        ordered = sorted(intervals, key=lambda iv: (iv.lo, iv.hi))
        if not ordered:
            return cls.empty()

        merged: List[Interval] = [ordered[0]]
        for interval in ordered[1:]:
            last = merged[-1]
            if interval.lo <= last.hi:
                if interval.hi > last.hi:
                    merged[-1] = Interval(last.lo, interval.hi)
            else:
                merged.append(interval)

        if len(merged) == 1 and merged[0].lo == -math.inf and merged[0].hi == math.inf:
            return cls.full_line()
        return cls(UNION, tuple(merged))

    @classmethod
    def interval(cls, lo: float, hi: float) -> 'PredictionSet':
        """Single interval, or the empty set when lo > hi"""
        if lo > hi:
            return cls.empty()
        return cls.union([Interval(lo, hi)])

    @property
    def is_empty(self) -> bool:
        return self.kind == EMPTY

    @property
    def is_full_line(self) -> bool:
        return self.kind == FULL_LINE

    @property
    def width(self) -> float:
        """Lebesgue measure of the set"""
        if self.kind == EMPTY:
            return 0.0
        if self.kind == FULL_LINE:
            return math.inf
        return float(sum(iv.length for iv in self.intervals))

    def contains(self, y: float) -> bool:
        if self.kind == EMPTY:
            return False
        if self.kind == FULL_LINE:
            return True
        return any(iv.contains(y) for iv in self.intervals)

    def convex_hull(self) -> 'PredictionSet':
        """Smallest interval containing the set"""
        if self.kind != UNION or len(self.intervals) == 1:
            return self
        return PredictionSet.union([Interval(self.intervals[0].lo, self.intervals[-1].hi)])

    def is_subset(self, other: 'PredictionSet') -> bool:
        """True when every point of this set lies in other"""
        if self.kind == EMPTY or other.kind == FULL_LINE:
            return True
        if other.kind == EMPTY:
            return False
        if self.kind == FULL_LINE:
            return False
        # other is canonical (disjoint, non-touching), so each piece must fit in one of its intervals
        return all(
            any(o.lo <= iv.lo and iv.hi <= o.hi for o in other.intervals)
            for iv in self.intervals
        )

    def __iter__(self) -> Iterator[Interval]:
        return iter(self.intervals)

    def to_dict(self) -> dict:
        return {
            'kind': self.kind,
            'intervals': [[iv.lo, iv.hi] for iv in self.intervals],
        }

    def __repr__(self):
        if self.kind == EMPTY:
            return "PredictionSet(∅)"
        if self.kind == FULL_LINE:
            return "PredictionSet(ℝ)"
        return f"PredictionSet({' ∪ '.join(repr(iv) for iv in self.intervals)})"


@dataclass(frozen=True)
class ScoredPoint:
    """
    A calibration point seen from a test feature vector: its residual and the
    nested set of its own family evaluated at that residual.
    """
    index: int
    score: float
    interval_at_score: Optional[Interval]

    @property
    def in_lambda(self) -> bool:
        """Whether the point's nested set at its residual is non-empty"""
        return self.interval_at_score is not None


def conformal_quantile(scores: Sequence[float], alpha: float) -> float:
    """
    Split-conformal radius: the k-th smallest score with k = ceil((1 - alpha)(m + 1)).

    Returns +inf when k exceeds the number of scores, which makes the
    prediction set the limit of the nested family.
    """
    _check_alpha(alpha)
    values = np.sort(np.asarray(scores, dtype=float).ravel())
    m = values.size
    if m == 0:
        raise ConformalError("no calibration scores")

    k = ceil_rank((1.0 - alpha) * (m + 1))
    if k > m:
        return math.inf
    return float(values[max(k, 1) - 1])


def rank_low(values: Sequence[float], alpha: float, n: int) -> Optional[float]:
    """
    floor(alpha (n + 1))-th smallest of values, where n counts all training
    points (not only those in values).

    Returns -inf when the rank is zero and None when the rank exceeds the
    number of values (the jackknife+ set is empty).
    """
    _check_alpha(alpha)
    ordered = np.sort(np.asarray(values, dtype=float).ravel())
    k = floor_rank(alpha * (n + 1))
    if k <= 0:
        return -math.inf
    if k > ordered.size:
        return None
    return float(ordered[k - 1])


def rank_high(values: Sequence[float], alpha: float, n: int) -> float:
    """ceil((1 - alpha)(n + 1))-th smallest of values; +inf when the rank exceeds the count"""
    _check_alpha(alpha)
    ordered = np.sort(np.asarray(values, dtype=float).ravel())
    k = ceil_rank((1.0 - alpha) * (n + 1))
    if k > ordered.size:
        return math.inf
    if k <= 0:
        return -math.inf
    return float(ordered[k - 1])


def set_union_width(prediction_set: PredictionSet) -> float:
    return prediction_set.width
