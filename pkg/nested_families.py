"""
Nested Prediction Set Families
Each family pairs a nested sequence of intervals F_t(x) with its induced
nonconformity score r(x, y) = inf{t : y in F_t(x)}

Supported kinds:
- MeanSymmetric   [mu(x) - t, mu(x) + t]
- MeanScaled      [mu(x) - t sigma(x), mu(x) + t sigma(x)]
- CQR             [q_lo(x) - t, q_hi(x) + t]
- CQRm            (1 + t)[q_lo(x), q_hi(x)] - t q_med(x)
- CQRr            [q_lo(x), q_hi(x)] +/- t (q_hi(x) - q_lo(x))
- Distributional  [q_(1/2 - s)(x), q_(1/2 + s)(x)] on a fixed level grid
"""
import math
import logging
from abc import ABC, abstractmethod
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from sklearn.base import clone
from sklearn.utils import check_array, check_X_y

from prediction_sets import ConformalError, Interval

logger = logging.getLogger(__name__)

# Relative floor applied to spreads and interquantile widths
SCALE_EPSILON = 1e-8

DISTRIBUTIONAL_LEVELS = np.round(np.arange(1, 100) / 100.0, 2)
_MEDIAN_COLUMN = 49
_GRID_STEP = 0.01
_GRID_EDGE = 0.49
# ulp steps allowed when reconciling a score with its bounds
_SETTLE_STEPS = 64


class Query(NamedTuple):
    """One quantity a family needs from its predictor"""
    what: str
    level: Optional[float] = None


MEAN = Query('mean')
SPREAD = Query('spread')


def quantile_query(level: float) -> Query:
    if not 0.0 <= level <= 1.0:
        raise ConformalError(f"quantile level must lie in [0, 1], got {level}")
    return Query('quantile', float(level))


class PredictorHandle(ABC):
    """
    A fitted regressor answering mean, spread and quantile queries.

    provenance records which training indices the predictor was fitted on;
    response_scale is the spread of the training responses and sets the
    floor for divisions inside the families.
    """
    provenance: Tuple[int, ...] = ()
    response_scale: float = 1.0

    @abstractmethod
    def estimates(self, X: np.ndarray, queries: List[Query]) -> np.ndarray:
        """Answer every query at every row of X; returns shape (len(X), len(queries))"""


class EstimatorHandle(PredictorHandle):
    """Predictor backed by fitted scikit-learn regressors"""

    def __init__(self, mean_model=None, spread_model=None,
                 quantile_models: Optional[Dict[float, Any]] = None,
                 response_scale: float = 1.0, provenance: Tuple[int, ...] = ()):
        self.mean_model = mean_model
        self.spread_model = spread_model
        self.quantile_models = quantile_models or {}
        self.response_scale = response_scale
        self.provenance = tuple(provenance)

    def estimates(self, X: np.ndarray, queries: List[Query]) -> np.ndarray:
        X = check_array(X)
        columns = []
        for query in queries:
            if query.what == 'mean':
                model = self.mean_model
            elif query.what == 'spread':
                model = self.spread_model
            else:
                model = self.quantile_models.get(round(query.level, 6))
            if model is None:
                raise ConformalError(f"predictor cannot answer {query.what} query (level={query.level})")
            columns.append(np.asarray(model.predict(X), dtype=float))
        return np.column_stack(columns) if columns else np.empty((X.shape[0], 0))


def response_scale_of(y: np.ndarray) -> float:
    """Standard deviation of the responses, or 1.0 when they are constant"""
    scale = float(np.std(y)) if len(y) else 0.0
    return scale if scale > 0 else 1.0


# ==================== FAMILY KINDS ====================

class FamilyKind(ABC):
    """
    Closed-form description of one nested family.

    prepare() turns raw predictor answers into the estimate matrix used by
    score() and bounds(); both are vectorised over rows. bounds() returns
    (lo, hi) arrays and encodes an empty set as lo > hi.
    """
    name: str = ''
    domain: Tuple[float, float] = (-math.inf, math.inf)

    @abstractmethod
    def queries(self) -> List[Query]:
        ...

    def prepare(self, raw: np.ndarray, scale: float) -> np.ndarray:
        return np.asarray(raw, dtype=float)

    @abstractmethod
    def score(self, est: np.ndarray, y: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def bounds(self, est: np.ndarray, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        ...

    def clamp(self, t: np.ndarray) -> np.ndarray:
        lo, hi = self.domain
        return np.clip(np.asarray(t, dtype=float), lo, hi)

    def __repr__(self):
        return f"{type(self).__name__}()"


class MeanSymmetric(FamilyKind):
    name = 'mean-symmetric'
    domain = (0.0, math.inf)

    def queries(self):
        return [MEAN]

    def score(self, est, y):
        return np.abs(np.asarray(y, dtype=float) - est[:, 0])

    def bounds(self, est, t):
        t = self.clamp(t)
        return est[:, 0] - t, est[:, 0] + t


class MeanScaled(FamilyKind):
    name = 'mean-scaled'
    domain = (0.0, math.inf)

    def queries(self):
        return [MEAN, SPREAD]

    def prepare(self, raw, scale):
        est = np.array(raw, dtype=float)
        est[:, 1] = np.maximum(est[:, 1], SCALE_EPSILON * scale)
        return est

    def score(self, est, y):
        return np.abs(np.asarray(y, dtype=float) - est[:, 0]) / est[:, 1]

    def bounds(self, est, t):
        t = self.clamp(t)
        return est[:, 0] - t * est[:, 1], est[:, 0] + t * est[:, 1]


class _QuantilePairKind(FamilyKind):
    """Families built on a lower/upper nominal quantile pair at levels beta and 1 - beta"""

    def __init__(self, beta: float):
        # beta = 1/2 collapses both ends onto the median, which is still a nested family
        if not 0.0 < beta <= 0.5:
            raise ConformalError(f"nominal quantile level must lie in (0, 1/2], got {beta}")
        self.beta = float(beta)

    def queries(self):
        return [quantile_query(self.beta), quantile_query(1.0 - self.beta)]

    def _sorted_pair(self, raw):
        raw = np.asarray(raw, dtype=float)
        # crossing quantiles are swapped so the family stays nested
        return np.minimum(raw[:, 0], raw[:, 1]), np.maximum(raw[:, 0], raw[:, 1])

    def __repr__(self):
        return f"{type(self).__name__}(beta={self.beta:g})"


class CQR(_QuantilePairKind):
    name = 'cqr'

    def prepare(self, raw, scale):
        lo, hi = self._sorted_pair(raw)
        return np.column_stack([lo, hi])

    def score(self, est, y):
        y = np.asarray(y, dtype=float)
        return np.maximum(est[:, 0] - y, y - est[:, 1])

    def bounds(self, est, t):
        t = self.clamp(t)
        return est[:, 0] - t, est[:, 1] + t


class CQRm(_QuantilePairKind):
    """Median-anchored expansion; the median is clipped into [q_lo, q_hi]"""
    name = 'cqr-m'

    def queries(self):
        return super().queries() + [quantile_query(0.5)]

    def prepare(self, raw, scale):
        lo, hi = self._sorted_pair(raw)
        med = np.clip(np.asarray(raw, dtype=float)[:, 2], lo, hi)
        floor = SCALE_EPSILON * scale
        return np.column_stack([lo, hi, np.maximum(med - lo, floor), np.maximum(hi - med, floor)])

    def score(self, est, y):
        y = np.asarray(y, dtype=float)
        return np.maximum((est[:, 0] - y) / est[:, 2], (y - est[:, 1]) / est[:, 3])

    def bounds(self, est, t):
        t = self.clamp(t)
        return est[:, 0] - t * est[:, 2], est[:, 1] + t * est[:, 3]


class CQRr(_QuantilePairKind):
    """Expansion proportional to the interquantile width"""
    name = 'cqr-r'
    domain = (-0.5, math.inf)

    def prepare(self, raw, scale):
        lo, hi = self._sorted_pair(raw)
        return np.column_stack([lo, hi, np.maximum(hi - lo, SCALE_EPSILON * scale)])

    def score(self, est, y):
        y = np.asarray(y, dtype=float)
        return np.maximum((est[:, 0] - y) / est[:, 2], (y - est[:, 1]) / est[:, 2])

    def bounds(self, est, t):
        t = self.clamp(t)
        return est[:, 0] - t * est[:, 2], est[:, 1] + t * est[:, 2]


class Distributional(FamilyKind):
    """
    Quantile-map family. The radius s is the distance from the median level:
    F_s(x) = [Q(1/2 - s), Q(1/2 + s)] with Q the piecewise-linear
    interpolation of the 99-level grid {0.01, ..., 0.99}.

    Past the grid (s > 0.49) both ends move outwards by
    d(s) = S (s - 0.49) / (1/2 - s), S the mean slope of Q, so every label
    receives a finite score inside (0, 1/2).
    """
    name = 'distributional'
    domain = (0.0, 0.5)

    def queries(self):
        return [quantile_query(level) for level in DISTRIBUTIONAL_LEVELS]

    def prepare(self, raw, scale):
        grid = np.maximum.accumulate(np.asarray(raw, dtype=float), axis=1)
        slope = np.maximum((grid[:, -1] - grid[:, 0]) / (DISTRIBUTIONAL_LEVELS[-1] - DISTRIBUTIONAL_LEVELS[0]),
                           SCALE_EPSILON * scale)
        return np.column_stack([grid, slope])

    @staticmethod
    def _grid_value(grid: np.ndarray, levels: np.ndarray) -> np.ndarray:
        position = np.clip((levels - DISTRIBUTIONAL_LEVELS[0]) / _GRID_STEP, 0.0, len(DISTRIBUTIONAL_LEVELS) - 1)
        left = np.minimum(np.floor(position).astype(int), len(DISTRIBUTIONAL_LEVELS) - 2)
        frac = position - left
        rows = np.arange(grid.shape[0])
        return grid[rows, left] + frac * (grid[rows, left + 1] - grid[rows, left])

    def score(self, est, y):
        grid, slope = est[:, :-1], est[:, -1]
        y = np.broadcast_to(np.asarray(y, dtype=float), (grid.shape[0],)).copy()
        rows = np.arange(grid.shape[0])
        median = grid[:, _MEDIAN_COLUMN]
        scores = np.zeros_like(y)

        def tail(distance):
            return _GRID_EDGE + _GRID_STEP * distance / (distance + slope)

        upper = y > median
        inside_up = upper & (y <= grid[:, -1])
        # first grid column >= y, counted from the median column
        k = _MEDIAN_COLUMN + (grid[:, _MEDIAN_COLUMN:] < y[:, None]).sum(axis=1)
        k = np.clip(k, _MEDIAN_COLUMN + 1, grid.shape[1] - 1)
        q_left, q_right = grid[rows, k - 1], grid[rows, k]
        with np.errstate(divide='ignore', invalid='ignore'):
            level_up = DISTRIBUTIONAL_LEVELS[k - 1] + _GRID_STEP * (y - q_left) / (q_right - q_left)
        scores = np.where(inside_up, level_up - 0.5, scores)
        beyond_up = upper & ~inside_up
        scores = np.where(beyond_up, tail(y - grid[:, -1]), scores)

        lower = y < median
        inside_low = lower & (y >= grid[:, 0])
        # number of grid columns <= y, up to the median column
        j = (grid[:, :_MEDIAN_COLUMN + 1] <= y[:, None]).sum(axis=1)
        j = np.clip(j, 1, _MEDIAN_COLUMN)
        q_left, q_right = grid[rows, j - 1], grid[rows, j]
        with np.errstate(divide='ignore', invalid='ignore'):
            level_low = DISTRIBUTIONAL_LEVELS[j - 1] + _GRID_STEP * (y - q_left) / (q_right - q_left)
        scores = np.where(inside_low, 0.5 - level_low, scores)
        beyond_low = lower & ~inside_low
        scores = np.where(beyond_low, tail(grid[:, 0] - y), scores)
        return self._settle(est, y, scores)

    def _settle(self, est, y, scores):
        """
        Move each score by whole ulps to the smallest radius whose bounds hold y.
        Near s = 1/2 the tail map loses precision, so the closed form alone can
        land a few ulps off either side.
        """
        def holds(rows, s):
            lo, hi = self.bounds(est[rows], s)
            return (lo <= y[rows]) & (y[rows] <= hi)

        s = scores.copy()
        rows = np.flatnonzero(s > 0)
        for _ in range(_SETTLE_STEPS):
            if rows.size == 0:
                break
            lower = np.nextafter(s[rows], 0.0)
            shrink = holds(rows, lower)
            s[rows[shrink]] = lower[shrink]
            rows = rows[shrink]

        rows = np.arange(s.size)
        for _ in range(_SETTLE_STEPS):
            rows = rows[~holds(rows, s[rows])]
            if rows.size == 0:
                break
            s[rows] = np.nextafter(s[rows], 0.5)
        else:
            # the full line at s = 1/2 holds every label
            rows = rows[~holds(rows, s[rows])]
            s[rows] = 0.5
        return s

    def bounds(self, est, t):
        grid, slope = est[:, :-1], est[:, -1]
        s = np.broadcast_to(self.clamp(t), (grid.shape[0],))
        core = np.minimum(s, _GRID_EDGE)
        lo = self._grid_value(grid, 0.5 - core)
        hi = self._grid_value(grid, 0.5 + core)
        with np.errstate(divide='ignore', invalid='ignore'):
            extra = np.where(s > _GRID_EDGE, slope * (s - _GRID_EDGE) / (0.5 - s), 0.0)
        extra = np.where(s >= 0.5, np.inf, extra)
        return lo - extra, hi + extra


FAMILY_KINDS: Dict[str, Callable[..., FamilyKind]] = {
    'mean-symmetric': MeanSymmetric,
    'mean-scaled': MeanScaled,
    'cqr': CQR,
    'cqr-m': CQRm,
    'cqr-r': CQRr,
    'distributional': Distributional,
}


# ==================== FITTED FAMILIES ====================

class NestedFamily:
    """A family kind bound to a fitted predictor"""

    def __init__(self, kind: FamilyKind, handle: PredictorHandle):
        self.kind = kind
        self.handle = handle

    def estimates(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        raw = self.handle.estimates(X, self.kind.queries())
        return self.kind.prepare(raw, self.handle.response_scale)

    def scores(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.kind.score(self.estimates(X), np.asarray(y, dtype=float))

    def score(self, x: np.ndarray, y: float) -> float:
        return float(self.scores(np.atleast_2d(x), np.array([y]))[0])

    def bounds(self, X: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray]:
        est = self.estimates(X)
        return self.kind.bounds(est, np.broadcast_to(np.asarray(t, dtype=float), (est.shape[0],)))

    def interval_at(self, x: np.ndarray, t: float) -> Optional[Interval]:
        """F_t(x), or None when the set is empty"""
        lo, hi = self.bounds(np.atleast_2d(x), t)
        if lo[0] > hi[0]:
            return None
        return Interval(lo[0], hi[0])

    def __repr__(self):
        return f"NestedFamily({self.kind!r}, provenance={len(self.handle.provenance)} points)"


class EstimatorFamilyBuilder:
    """
    Fits scikit-learn regressors on a training subset and returns the nested
    family of the requested kind.

    mean_estimator/spread_estimator are unfitted estimator templates;
    quantile_factory maps a level to an unfitted quantile regressor, e.g.
    lambda q: GradientBoostingRegressor(loss='quantile', alpha=q).
    The spread model is fitted to absolute residuals of the mean model.
    """

    def __init__(self, kind: FamilyKind, mean_estimator=None, spread_estimator=None,
                 quantile_factory: Optional[Callable[[float], Any]] = None):
        self.kind = kind
        self.mean_estimator = mean_estimator
        self.spread_estimator = spread_estimator
        self.quantile_factory = quantile_factory

    @staticmethod
    def _seeded(estimator, seed: int):
        estimator = clone(estimator)
        if 'random_state' in estimator.get_params():
            estimator.set_params(random_state=seed)
        return estimator

    def __call__(self, X: np.ndarray, y: np.ndarray, seed: int = 0,
                 provenance: Tuple[int, ...] = ()) -> NestedFamily:
        X, y = check_X_y(X, y, y_numeric=True)
        mean_model = spread_model = None
        quantile_models = {}

        for query in self.kind.queries():
            if query.what in ('mean', 'spread') and mean_model is None:
                if self.mean_estimator is None:
                    raise ConformalError(f"{self.kind.name} family needs a mean estimator")
                mean_model = self._seeded(self.mean_estimator, seed).fit(X, y)
            if query.what == 'spread' and spread_model is None:
                if self.spread_estimator is None:
                    raise ConformalError(f"{self.kind.name} family needs a spread estimator")
                residuals = np.abs(y - mean_model.predict(X))
                spread_model = self._seeded(self.spread_estimator, seed).fit(X, residuals)
            if query.what == 'quantile':
                if self.quantile_factory is None:
                    raise ConformalError(f"{self.kind.name} family needs a quantile estimator")
                model = self._seeded(self.quantile_factory(query.level), seed)
                quantile_models[round(query.level, 6)] = model.fit(X, y)

        handle = EstimatorHandle(mean_model, spread_model, quantile_models,
                                 response_scale=response_scale_of(y), provenance=provenance)
        return NestedFamily(self.kind, handle)
