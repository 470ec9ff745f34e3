"""
Conformal Calibration and Aggregation
Split conformal, leave-one-out and K-fold cross-conformal, jackknife+ / CV+,
out-of-bag conformal (including QOOB) and subsampling/bootstrap aggregation,
all built on one weighted sweep over interval endpoints
"""
import os
import math
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.utils import check_X_y

from prediction_sets import (
    RANK_TOLERANCE, ConformalError, Interval, PredictionSet, ScoredPoint,
    conformal_quantile, rank_high, rank_low,
)
from nested_families import CQR, FamilyKind, NestedFamily
from quantile_forest import (
    BOOTSTRAP, SUBSAMPLE, DEFAULT_MIN_LEAF, QuantileForest, binomial_tree_count,
)

logger = logging.getLogger(__name__)

# Thread pool size for refits and test-set prediction (0 = executor default)
CONFORMAL_WORKERS = int(os.getenv('CONFORMAL_WORKERS', '0')) or None

CROSS = 'cross'
JACKKNIFE_PLUS = 'jackknife+'
HULL = 'hull'
AGGREGATIONS = (CROSS, JACKKNIFE_PLUS, HULL)

FIXED_K = 'fixed'
BINOMIAL_K = 'binomial'

# FamilyBuilder(X, y, seed=..., provenance=...) -> NestedFamily
FamilyBuilder = Callable[..., NestedFamily]

_K_STREAM = 0x4B


def derive_seed(master: int, *keys: int) -> int:
    """Independent 32-bit seed for a (master, keys...) pair"""
    return int(np.random.SeedSequence([int(master), *[int(k) for k in keys]]).generate_state(1)[0])


# ==================== SWEEP ====================

@dataclass(frozen=True)
class SweepInstance:
    """
    Weighted stabbing problem: the answer is
    {y : sum of weights of intervals containing y > threshold}.
    """
    lo: np.ndarray
    hi: np.ndarray
    weights: np.ndarray
    threshold: float

    @classmethod
    def from_entries(cls, entries: Sequence[Tuple[Interval, float]], threshold: float) -> 'SweepInstance':
        lo = np.array([iv.lo for iv, _ in entries], dtype=float)
        hi = np.array([iv.hi for iv, _ in entries], dtype=float)
        weights = np.array([w for _, w in entries], dtype=float)
        return cls(lo, hi, weights, float(threshold))

    @classmethod
    def unweighted(cls, lo: np.ndarray, hi: np.ndarray, alpha: float, n: int) -> 'SweepInstance':
        """Cross-conformal condition: count > alpha (n + 1) - 1"""
        lo = np.asarray(lo, dtype=float)
        return cls(lo, np.asarray(hi, dtype=float), np.ones_like(lo), alpha * (n + 1) - 1.0)


def sweep(instance: SweepInstance) -> PredictionSet:
    """
    Exact solution of the stabbing condition in O(E log E).

    Endpoints are visited in sorted order with left ends before right ends at
    equal values, so closed intervals that touch keep their shared point.
    """
    if instance.threshold < -RANK_TOLERANCE:
        return PredictionSet.full_line()
    if instance.lo.size == 0:
        return PredictionSet.empty()

    values = np.concatenate([instance.lo, instance.hi])
    is_right = np.concatenate([np.zeros(instance.lo.size, dtype=np.int8), np.ones(instance.hi.size, dtype=np.int8)])
    signed = np.concatenate([instance.weights, -instance.weights])

    order = np.lexsort((is_right, values))
    values, is_right, signed = values[order], is_right[order], signed[order]
    after = np.cumsum(signed)
    before = np.concatenate([[0.0], after[:-1]])
    level = instance.threshold + RANK_TOLERANCE

    starts = values[(is_right == 0) & (after > level) & (before <= level)]
    ends = values[(is_right == 1) & (before > level) & (after <= level)]
    if len(ends) < len(starts):
        ends = np.append(ends, values[-1])
    return PredictionSet.union(Interval(a, b) for a, b in zip(starts, ends))


def jackknife_plus_bounds(lo: np.ndarray, hi: np.ndarray, alpha: float, n: int) -> PredictionSet:
    """[q-(lo), q+(hi)] over the non-empty calibration intervals"""
    left = rank_low(lo, alpha, n)
    if left is None:
        return PredictionSet.empty()
    right = rank_high(hi, alpha, n)
    return PredictionSet.interval(left, right)


def jackknife_plus(scored: Sequence[ScoredPoint], alpha: float, n: int) -> PredictionSet:
    """Jackknife+ interval from scored points; points outside Lambda_x are ignored"""
    kept = [p.interval_at_score for p in scored if p.in_lambda]
    lo = np.array([iv.lo for iv in kept], dtype=float)
    hi = np.array([iv.hi for iv in kept], dtype=float)
    return jackknife_plus_bounds(lo, hi, alpha, n)


# ==================== PREDICTORS ====================

class CalibratedPredictor(ABC):
    """A calibrated conformal method mapping feature vectors to prediction sets"""
    method: str = ''
    alpha: float = 0.1

    @abstractmethod
    def predict(self, x: np.ndarray) -> PredictionSet:
        ...

    def predict_many(self, X: np.ndarray) -> List[PredictionSet]:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        with ThreadPoolExecutor(max_workers=CONFORMAL_WORKERS) as executor:
            return list(executor.map(self.predict, X))

    def __repr__(self):
        return f"{type(self).__name__}(method={self.method!r}, alpha={self.alpha:g})"


def _family_bounds(family: NestedFamily, x: np.ndarray, radii: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bounds of one family at a single x for many radii"""
    est = family.estimates(np.atleast_2d(x))
    return family.kind.bounds(np.repeat(est, len(radii), axis=0), radii)


class SplitConformalPredictor(CalibratedPredictor):
    method = 'split'

    def __init__(self, family: NestedFamily, scores: np.ndarray, alpha: float):
        self.family = family
        self.scores = np.asarray(scores, dtype=float)
        self.alpha = alpha
        self.radius = conformal_quantile(self.scores, alpha)
        if math.isinf(self.radius):
            logger.warning(f"Split conformal with {len(self.scores)} scores at alpha={alpha}: "
                           f"rank exceeds sample size, every prediction is the full line")

    def predict(self, x):
        if math.isinf(self.radius):
            return PredictionSet.full_line()
        interval = self.family.interval_at(x, self.radius)
        if interval is None:
            return PredictionSet.empty()
        return PredictionSet.union([interval])


class CrossConformalPredictor(CalibratedPredictor):
    """
    Cross-style aggregation of per-point residuals. For a test x, point i
    contributes the interval of its own held-out family at radius r_i;
    `intervals_at` supplies those (lo, hi) arrays (lo > hi marks an empty set).

    aggregation is 'cross' (sweep), 'jackknife+' (ranked endpoints) or 'hull'
    (convex hull of the cross set).
    """

    def __init__(self, method: str, alpha: float, scores: np.ndarray,
                 intervals_at: Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]],
                 aggregation: str = CROSS, forest: Optional[QuantileForest] = None,
                 kind: Optional[FamilyKind] = None):
        if aggregation not in AGGREGATIONS:
            raise ConformalError(f"unknown aggregation '{aggregation}', expected one of {AGGREGATIONS}")
        self.method = method
        self.alpha = alpha
        self.scores = np.asarray(scores, dtype=float)
        self.n = len(self.scores)
        self.intervals_at = intervals_at
        self.aggregation = aggregation
        self.forest = forest
        self.kind = kind

    def predict_all(self, x: np.ndarray) -> Dict[str, PredictionSet]:
        """Cross set, its convex hull and the jackknife+ interval at x"""
        lo, hi = self.intervals_at(x)
        keep = lo <= hi
        cross = sweep(SweepInstance.unweighted(lo[keep], hi[keep], self.alpha, self.n))
        return {
            CROSS: cross,
            HULL: cross.convex_hull(),
            JACKKNIFE_PLUS: jackknife_plus_bounds(lo[keep], hi[keep], self.alpha, self.n),
        }

    def predict(self, x):
        lo, hi = self.intervals_at(x)
        keep = lo <= hi
        if self.aggregation == JACKKNIFE_PLUS:
            return jackknife_plus_bounds(lo[keep], hi[keep], self.alpha, self.n)
        cross = sweep(SweepInstance.unweighted(lo[keep], hi[keep], self.alpha, self.n))
        return cross.convex_hull() if self.aggregation == HULL else cross


class AggregatedConformalPredictor(CalibratedPredictor):
    """
    Subsampling / bootstrap conformal: averaged p-values over K resamples,
    solved as a weighted sweep.
    """

    def __init__(self, method: str, alpha: float, families: List[NestedFamily],
                 residuals: List[np.ndarray], draws: List[Tuple[np.ndarray, np.ndarray]],
                 aggregation: str = CROSS):
        if aggregation not in (CROSS, HULL):
            raise ConformalError(f"aggregated conformal supports '{CROSS}' or '{HULL}', got '{aggregation}'")
        self.method = method
        self.alpha = alpha
        self.families = families
        self.residuals = [np.asarray(r, dtype=float) for r in residuals]
        self.draws = draws
        self.aggregation = aggregation

        K = len(families)
        per_draw = [1.0 / (K * (len(r) + 1)) for r in self.residuals]
        self.weights = np.concatenate([np.full(len(r), w) for r, w in zip(self.residuals, per_draw)])
        self.offset = float(sum(per_draw))
        self.threshold = alpha - self.offset

    def p_value(self, x: np.ndarray, y: float) -> float:
        """Average over resamples of (#{i : R_k(x, y) <= R_k(X_i, Y_i)} + 1) / (|M_k^c| + 1)"""
        values = [
            resampled_p_value(residuals, family.score(x, y))
            for family, residuals in zip(self.families, self.residuals)
        ]
        return float(np.mean(values))

    def intervals_at(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        bounds = [_family_bounds(family, x, residuals) for family, residuals in zip(self.families, self.residuals)]
        return np.concatenate([b[0] for b in bounds]), np.concatenate([b[1] for b in bounds])

    def predict(self, x):
        lo, hi = self.intervals_at(x)
        keep = lo <= hi
        # y in F_{R_k,i}(x)  <=>  R_k(x, y) <= R_k(X_i, Y_i)
        result = sweep(SweepInstance(lo[keep], hi[keep], self.weights[keep], self.threshold))
        return result.convex_hull() if self.aggregation == HULL else result


def resampled_p_value(residuals: Sequence[float], label_score: float) -> float:
    residuals = np.asarray(residuals, dtype=float)
    return float(((residuals >= label_score).sum() + 1) / (len(residuals) + 1))


# ==================== CALIBRATION ====================

def split_calibrate(family: NestedFamily, X_cal: np.ndarray, y_cal: np.ndarray,
                    alpha: float) -> SplitConformalPredictor:
    """Calibrate a family fitted on separate data using held-out residuals"""
    if len(y_cal) == 0:
        raise ConformalError("no calibration scores")
    X_cal, y_cal = check_X_y(X_cal, y_cal, y_numeric=True)
    scores = family.scores(X_cal, y_cal)
    predictor = SplitConformalPredictor(family, scores, alpha)
    logger.info(f"Split conformal calibrated on {len(y_cal)} points: radius={predictor.radius:.4g}")
    return predictor


def _fold_out_scores(X: np.ndarray, y: np.ndarray, builder: FamilyBuilder,
                     folds: List[np.ndarray], seed: int) -> Tuple[List[NestedFamily], np.ndarray, np.ndarray]:
    """
    Fit one family per fold on the remaining points and score the fold.
    The family seed depends on the smallest index of its fold, so equal folds
    reproduce equal families whatever order the folds come in.
    """
    n = len(y)

    def fit_fold(fold: np.ndarray):
        keep = np.ones(n, dtype=bool)
        keep[fold] = False
        family = builder(X[keep], y[keep], seed=derive_seed(seed, int(fold.min())),
                         provenance=tuple(np.flatnonzero(keep)))
        return family, family.scores(X[fold], y[fold])

    with ThreadPoolExecutor(max_workers=CONFORMAL_WORKERS) as executor:
        fitted = list(executor.map(fit_fold, folds))

    families = [family for family, _ in fitted]
    fold_of = np.empty(n, dtype=np.int64)
    scores = np.empty(n)
    for k, fold in enumerate(folds):
        fold_of[fold] = k
        scores[fold] = fitted[k][1]
    return families, fold_of, scores


def _fold_intervals(families: List[NestedFamily], fold_of: np.ndarray, scores: np.ndarray):
    def intervals_at(x: np.ndarray):
        lo, hi = np.empty(len(scores)), np.empty(len(scores))
        for k, family in enumerate(families):
            members = np.flatnonzero(fold_of == k)
            lo[members], hi[members] = _family_bounds(family, x, scores[members])
        return lo, hi
    return intervals_at


def _cross_method_name(aggregation: str, cross: str, plus: str) -> str:
    if aggregation == JACKKNIFE_PLUS:
        return plus
    return cross if aggregation == CROSS else f"{cross}-hull"


def loo_cross(X: np.ndarray, y: np.ndarray, builder: FamilyBuilder, alpha: float,
              seed: int = 0, aggregation: str = CROSS) -> CrossConformalPredictor:
    """Leave-one-out cross-conformal (or jackknife+) with n exact refits"""
    X, y = check_X_y(X, y, y_numeric=True)
    n = len(y)
    if n < 2:
        raise ConformalError(f"Need at least 2 training points, got {n}")
    folds = [np.array([i]) for i in range(n)]
    families, fold_of, scores = _fold_out_scores(X, y, builder, folds, seed)
    logger.info(f"Leave-one-out calibration finished: {n} refits")
    return CrossConformalPredictor(_cross_method_name(aggregation, 'loo-cross', JACKKNIFE_PLUS), alpha,
                                   scores, _fold_intervals(families, fold_of, scores), aggregation)


def kfold_cross(X: np.ndarray, y: np.ndarray, builder: FamilyBuilder, K: int, alpha: float,
                seed: int = 0, aggregation: str = CROSS) -> CrossConformalPredictor:
    """K-fold cross-conformal (or CV+) on equal-sized folds from a seeded shuffle"""
    X, y = check_X_y(X, y, y_numeric=True)
    n = len(y)
    if K < 2 or K > n:
        raise ConformalError(f"K must lie in [2, {n}], got {K}")
    if n % K != 0:
        raise ConformalError(f"fold sizes must be equal: n={n} is not divisible by K={K}")
    permutation = np.random.default_rng(seed).permutation(n)
    folds = [np.sort(fold) for fold in np.split(permutation, K)]
    families, fold_of, scores = _fold_out_scores(X, y, builder, folds, seed)
    logger.info(f"{K}-fold calibration finished on {n} points")
    return CrossConformalPredictor(_cross_method_name(aggregation, 'kfold-cross', 'cv+'), alpha,
                                   scores, _fold_intervals(families, fold_of, scores), aggregation)


def _oob_intervals(forest: QuantileForest, kind: FamilyKind, scores: np.ndarray):
    queries = kind.queries()

    def intervals_at(x: np.ndarray):
        profile = forest.profile(forest.leaf_ids(np.atleast_2d(x))[0])
        raw = forest.subset_estimates(profile, forest.oob_matrix_, queries)
        est = kind.prepare(raw, forest.response_scale_)
        return kind.bounds(est, scores)
    return intervals_at


def oob_calibrate(X: np.ndarray, y: np.ndarray, kind: FamilyKind, alpha: float,
                  forest: Optional[QuantileForest] = None, n_trees: int = 100,
                  mode: str = BOOTSTRAP, bag_size: Optional[int] = None,
                  min_leaf: int = DEFAULT_MIN_LEAF, mtry: Optional[int] = None, seed: int = 0,
                  k_mode: str = FIXED_K, k_tilde: Optional[int] = None,
                  aggregation: str = CROSS, method: Optional[str] = None) -> CrossConformalPredictor:
    """
    Out-of-bag conformal: the family of point i is the chosen kind evaluated
    on the trees whose bag excludes i.

    With k_mode='binomial' the number of trees is drawn from
    Binomial(k_tilde, p) before anything is fitted, which requires this
    function to fit the forest itself.
    """
    X, y = check_X_y(X, y, y_numeric=True)
    n = len(y)
    if forest is None:
        if k_mode == BINOMIAL_K:
            if k_tilde is None:
                raise ConformalError("binomial K mode needs k_tilde")
            m = bag_size if bag_size is not None else (n if mode == BOOTSTRAP else max(1, n // 2))
            n_trees = binomial_tree_count(k_tilde, n, m, mode, np.random.default_rng([seed, _K_STREAM]))
        elif k_mode != FIXED_K:
            raise ConformalError(f"unknown K mode '{k_mode}'")
        forest = QuantileForest(n_trees=n_trees, mode=mode, bag_size=bag_size,
                                min_leaf=min_leaf, mtry=mtry, seed=seed).fit(X, y)
    elif k_mode == BINOMIAL_K:
        raise ConformalError("binomial K mode draws the tree count before fitting; pass no forest")
    if forest.n_train != n:
        raise ConformalError(f"forest was fitted on {forest.n_train} points, got {n}")

    raw = forest.oob_estimates(X, kind.queries())
    scores = kind.score(kind.prepare(raw, forest.response_scale_), y)
    oob_sizes = forest.oob_matrix_.sum(axis=1)
    logger.info(f"OOB calibration finished: n={n}, T={len(forest.trees_)}, kind={kind.name}, "
                f"OOB trees per point min={oob_sizes.min()} mean={oob_sizes.mean():.1f}")

    method = method or _cross_method_name(aggregation, 'oob-cc', 'oob-jp')
    return CrossConformalPredictor(method, alpha, scores, _oob_intervals(forest, kind, scores), aggregation,
                                   forest=forest, kind=kind)


def qoob(X: np.ndarray, y: np.ndarray, alpha: float, n_trees: int = 100, beta: Optional[float] = None,
         mode: str = BOOTSTRAP, seed: int = 0, min_leaf: int = DEFAULT_MIN_LEAF,
         bag_size: Optional[int] = None, mtry: Optional[int] = None,
         aggregation: str = CROSS, forest: Optional[QuantileForest] = None,
         k_mode: str = FIXED_K, k_tilde: Optional[int] = None) -> CrossConformalPredictor:
    """
    Quantile out-of-bag conformal: CQR nested sets around out-of-bag forest
    quantiles at levels beta and 1 - beta (default beta = 2 alpha), aggregated
    cross-conformally ('cross'), by jackknife+ or as the convex hull.
    """
    beta = 2 * alpha if beta is None else beta
    if not 0.0 < beta <= 0.5:
        raise ConformalError(f"nominal quantile level must lie in (0, 1/2], got {beta}")
    if forest is None and k_mode == FIXED_K and n_trees < 2:
        raise ConformalError(f"QOOB needs at least 2 trees, got {n_trees}")
    if aggregation not in AGGREGATIONS:
        raise ConformalError(f"unknown aggregation '{aggregation}', expected one of {AGGREGATIONS}")
    method = {CROSS: 'qoob', JACKKNIFE_PLUS: 'qoob-jp', HULL: 'qoob-conv'}[aggregation]
    return oob_calibrate(X, y, CQR(beta), alpha, forest=forest, n_trees=n_trees, mode=mode,
                         bag_size=bag_size, min_leaf=min_leaf, mtry=mtry, seed=seed,
                         k_mode=k_mode, k_tilde=k_tilde, aggregation=aggregation, method=method)


def aggregated_conformal(X: np.ndarray, y: np.ndarray, builder: FamilyBuilder, K: int,
                         mode: str, m: int, alpha: float, seed: int = 0,
                         aggregation: str = CROSS) -> AggregatedConformalPredictor:
    """
    Subsampling (mode='subsample') or bootstrap (mode='bootstrap') conformal.
    Each of the K draws fits a family on M_k and keeps residuals on the
    complement [n] \\ M_k.
    """
    X, y = check_X_y(X, y, y_numeric=True)
    n = len(y)
    if K < 1:
        raise ConformalError(f"K must be >= 1, got {K}")
    if mode not in (SUBSAMPLE, BOOTSTRAP):
        raise ConformalError(f"unknown resampling mode '{mode}'")
    if mode == SUBSAMPLE and not 1 <= m <= n:
        raise ConformalError(f"subsample size must lie in [1, {n}], got {m}")
    if m < 1:
        raise ConformalError(f"resample size must be >= 1, got {m}")

    rng = np.random.default_rng(seed)
    draws = []
    for k in range(K):
        if mode == SUBSAMPLE:
            members = np.sort(rng.choice(n, size=m, replace=False))
        else:
            members = np.sort(rng.integers(0, n, size=m))
        complement = np.setdiff1d(np.arange(n), members)
        if complement.size == 0:
            raise ConformalError(f"degenerate resample: draw {k} leaves no calibration points")
        draws.append((members, complement))

    def fit_draw(k: int):
        members, complement = draws[k]
        family = builder(X[members], y[members], seed=derive_seed(seed, k), provenance=tuple(members))
        return family, family.scores(X[complement], y[complement])

    with ThreadPoolExecutor(max_workers=CONFORMAL_WORKERS) as executor:
        fitted = list(executor.map(fit_draw, range(K)))

    method = 'subsample-agg' if mode == SUBSAMPLE else 'bootstrap-agg'
    logger.info(f"{method} calibration finished: K={K}, m={m}, n={n}")
    return AggregatedConformalPredictor(method, alpha, [f for f, _ in fitted], [r for _, r in fitted],
                                        draws, aggregation)
