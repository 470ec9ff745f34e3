"""
Quantile Regression Forest
Bagged CART regression trees with in-bag bookkeeping. Answers mean, spread
and quantile queries from the full ensemble or from any subset of trees,
in particular the out-of-bag trees of a training point.
"""
import os
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_array, check_X_y

from prediction_sets import ConformalError
from nested_families import FamilyKind, NestedFamily, PredictorHandle, Query, response_scale_of

logger = logging.getLogger(__name__)

# Thread pool size for tree fitting (0 = executor default)
FOREST_WORKERS = int(os.getenv('FOREST_WORKERS', '0')) or None

BOOTSTRAP = 'bootstrap'
SUBSAMPLE = 'subsample'
BAG_MODES = (BOOTSTRAP, SUBSAMPLE)

DEFAULT_MIN_LEAF = 5
SCHEMA_VERSION = 1

_CDF_TOLERANCE = 1e-12


@dataclass(frozen=True)
class Bag:
    """Training indices drawn for one tree (sorted; repeats allowed for bootstrap)"""
    indices: np.ndarray
    mode: str


def draw_bag(n: int, m: int, mode: str, rng: np.random.Generator) -> Bag:
    if mode == BOOTSTRAP:
        indices = rng.integers(0, n, size=m)
    elif mode == SUBSAMPLE:
        indices = rng.choice(n, size=m, replace=False)
    else:
        raise ConformalError(f"unknown bag mode '{mode}', expected one of {BAG_MODES}")
    return Bag(np.sort(indices).astype(np.int64), mode)


def out_of_bag_probability(n: int, m: int, mode: str) -> float:
    """Probability that a fresh (n+1)-th point is left out of a bag drawn from n + 1 points"""
    if mode == BOOTSTRAP:
        return (1.0 - 1.0 / (n + 1)) ** m
    if mode == SUBSAMPLE:
        return 1.0 - m / (n + 1)
    raise ConformalError(f"unknown bag mode '{mode}'")


def binomial_tree_count(k_tilde: int, n: int, m: int, mode: str, rng: np.random.Generator) -> int:
    """
    Draw the number of trees K ~ Binomial(k_tilde, p) that makes
    out-of-bag aggregation carry its finite-sample guarantee.
    Must be drawn before any model is fitted.
    """
    if k_tilde < 1:
        raise ConformalError(f"k_tilde must be >= 1, got {k_tilde}")
    k = int(rng.binomial(k_tilde, out_of_bag_probability(n, m, mode)))
    if k == 0:
        raise ConformalError("K drawn as 0: no trees to aggregate")
    logger.debug(f"Drew K={k} trees from Binomial({k_tilde}, {out_of_bag_probability(n, m, mode):.6f})")
    return k


# ==================== REGRESSION TREE ====================

def _best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int],
                min_leaf: int) -> Optional[Tuple[int, float]]:
    """
    Exhaustive variance-reduction split over midpoints of sorted unique values.
    Ties keep the lowest feature id, then the lowest threshold.
    """
    n = len(y)
    total = y.sum()
    parent = total * total / n
    best_gain, best = 0.0, None
    left_counts = np.arange(1, n)

    for feature in features:
        order = np.argsort(X[:, feature], kind='mergesort')
        xs, ys = X[order, feature], y[order]
        left_sum = np.cumsum(ys)[:-1]
        right_sum = total - left_sum
        valid = (xs[:-1] < xs[1:]) & (left_counts >= min_leaf) & (n - left_counts >= min_leaf)
        if not valid.any():
            continue
        objective = left_sum ** 2 / left_counts + right_sum ** 2 / (n - left_counts)
        objective = np.where(valid, objective, -np.inf)
        k = int(np.argmax(objective))
        gain = objective[k] - parent
        if gain > best_gain:
            best_gain = gain
            best = (int(feature), float((xs[k] + xs[k + 1]) / 2.0))
    return best


class RegressionTree:
    """
    Binary CART tree. Internal nodes store (feature, threshold) and route
    x[feature] <= threshold to the left child; each leaf stores the multiset
    of training indices that reached it.
    """

    def __init__(self, feature, threshold, left, right, leaf_of_node, leaves: List[np.ndarray]):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.leaf_of_node = np.asarray(leaf_of_node, dtype=np.int64)
        self.leaves = [np.asarray(members, dtype=np.int64) for members in leaves]

    @classmethod
    def grow(cls, X: np.ndarray, y: np.ndarray, bag: np.ndarray, min_leaf: int,
             mtry: int, rng: np.random.Generator) -> 'RegressionTree':
        d = X.shape[1]
        feature, threshold, left, right, leaf_of_node = [], [], [], [], []
        leaves: List[np.ndarray] = []

        def new_node():
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_of_node.append(-1)
            return len(feature) - 1

        stack = [(new_node(), np.asarray(bag, dtype=np.int64))]
        while stack:
            node, members = stack.pop()
            split = None
            ys = y[members]
            if len(members) >= 2 * min_leaf and np.ptp(ys) > 0:
                features = range(d) if mtry >= d else np.sort(rng.choice(d, size=mtry, replace=False))
                split = _best_split(X[members], ys, features, min_leaf)

            if split is None:
                leaf_of_node[node] = len(leaves)
                leaves.append(members)
                continue

            f, thr = split
            go_left = X[members, f] <= thr
            feature[node], threshold[node] = f, thr
            left[node], right[node] = new_node(), new_node()
            stack.append((right[node], members[~go_left]))
            stack.append((left[node], members[go_left]))

        return cls(feature, threshold, left, right, leaf_of_node, leaves)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by each row of X"""
        nodes = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[nodes] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            current = nodes[rows]
            go_left = X[rows, self.feature[current]] <= self.threshold[current]
            nodes[rows] = np.where(go_left, self.left[current], self.right[current])
            active = self.feature[nodes] >= 0
        return self.leaf_of_node[nodes]

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'feature': self.feature.tolist(),
            'threshold': self.threshold.tolist(),
            'left': self.left.tolist(),
            'right': self.right.tolist(),
            'leaf_of_node': self.leaf_of_node.tolist(),
            'leaves': [members.tolist() for members in self.leaves],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RegressionTree':
        return cls(data['feature'], data['threshold'], data['left'], data['right'],
                   data['leaf_of_node'], data['leaves'])


# ==================== FOREST ====================

@dataclass
class LeafProfile:
    """What every tree says about one feature vector"""
    tree_means: np.ndarray   # (T,) leaf mean per tree
    values: np.ndarray       # (V,) sorted distinct responses over the reached leaves
    cdf: np.ndarray          # (T, V) per-tree leaf CDF evaluated at values


class QuantileForest(BaseEstimator, RegressorMixin):
    """
    Bagged regression trees with quantile queries (Meinshausen weighting:
    each tree's leaf members share equal total weight).

    Args:
        n_trees: number of trees T
        mode: 'bootstrap' (with replacement) or 'subsample' (without)
        bag_size: m; defaults to n for bootstrap and n // 2 for subsampling
        min_leaf: minimum number of (bagged) samples per leaf
        mtry: features examined per split; defaults to all features
        seed: master seed; tree j draws from the stream (seed, j)
    """

    def __init__(self, n_trees: int = 100, mode: str = BOOTSTRAP, bag_size: Optional[int] = None,
                 min_leaf: int = DEFAULT_MIN_LEAF, mtry: Optional[int] = None, seed: int = 0):
        self.n_trees = n_trees
        self.mode = mode
        self.bag_size = bag_size
        self.min_leaf = min_leaf
        self.mtry = mtry
        self.seed = seed

    def _resolved_bag_size(self, n: int) -> int:
        if self.bag_size is not None:
            return int(self.bag_size)
        return n if self.mode == BOOTSTRAP else max(1, n // 2)

    def fit(self, X, y, bags: Optional[Sequence[Sequence[int]]] = None) -> 'QuantileForest':
        """
        Grow the ensemble.

        Args:
            X, y: training sample
            bags: optional explicit bags (one index list per tree); when given,
                they replace the random draws and n_trees is ignored
        """
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        n, d = X.shape
        m = self._resolved_bag_size(n) if bags is None else max(len(b) for b in bags)
        if n < 2:
            raise ConformalError(f"Need at least 2 training points, got {n}")
        if self.n_trees < 1:
            raise ConformalError(f"n_trees must be >= 1, got {self.n_trees}")
        if not 1 <= m <= n:
            raise ConformalError(f"bag size must lie in [1, {n}], got {m}")
        if self.min_leaf < 1:
            raise ConformalError(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.mode not in BAG_MODES:
            raise ConformalError(f"unknown bag mode '{self.mode}', expected one of {BAG_MODES}")
        mtry = d if self.mtry is None else max(1, min(int(self.mtry), d))

        def grow(tree_id: int):
            rng = np.random.default_rng([int(self.seed), tree_id])
            if bags is None:
                bag = draw_bag(n, m, self.mode, rng)
            else:
                bag = Bag(np.sort(np.asarray(bags[tree_id], dtype=np.int64)), self.mode)
            return bag, RegressionTree.grow(X, y, bag.indices, self.min_leaf, mtry, rng)

        n_trees = self.n_trees if bags is None else len(bags)
        with ThreadPoolExecutor(max_workers=FOREST_WORKERS) as executor:
            grown = list(executor.map(grow, range(n_trees)))

        self.bags_ = [bag for bag, _ in grown]
        self.trees_ = [tree for _, tree in grown]
        self._finalize(y, d)
        logger.info(f"Quantile forest fitted: T={n_trees}, n={n}, m={m}, mode={self.mode}, "
                    f"mean leaves={np.mean([t.n_leaves for t in self.trees_]):.1f}")
        return self

    def _finalize(self, y: np.ndarray, n_features: int):
        self.y_ = np.asarray(y, dtype=float)
        self.n_features_in_ = n_features
        self.response_scale_ = response_scale_of(self.y_)
        n = len(self.y_)

        in_bag = np.zeros((n, len(self.bags_)), dtype=bool)
        for j, bag in enumerate(self.bags_):
            in_bag[bag.indices, j] = True
        self.oob_matrix_ = ~in_bag

        # per-leaf sorted responses and means, used by every query
        self._leaf_sorted = [[np.sort(self.y_[members]) for members in tree.leaves] for tree in self.trees_]
        self._leaf_means = [np.array([self.y_[members].mean() for members in tree.leaves]) for tree in self.trees_]

        never_oob = int((self.oob_matrix_.sum(axis=1) == 0).sum())
        if never_oob:
            logger.warning(f"{never_oob} training points are never out-of-bag; OOB methods will reject this forest")

    @property
    def oob_map(self) -> List[np.ndarray]:
        """For each training index i, the ids of trees whose bag excludes i"""
        return [np.flatnonzero(row) for row in self.oob_matrix_]

    @property
    def n_train(self) -> int:
        return len(self.y_)

    def never_out_of_bag(self) -> np.ndarray:
        return np.flatnonzero(self.oob_matrix_.sum(axis=1) == 0)

    # -------------------- queries --------------------

    def leaf_ids(self, X: np.ndarray) -> np.ndarray:
        X = check_array(X, dtype=np.float64)
        return np.column_stack([tree.apply(X) for tree in self.trees_])

    def profile(self, leaf_row: np.ndarray) -> LeafProfile:
        """Leaf statistics for one feature vector given its leaf id in every tree"""
        sorted_leaves = [self._leaf_sorted[j][leaf] for j, leaf in enumerate(leaf_row)]
        values = np.unique(np.concatenate(sorted_leaves))
        cdf = np.vstack([np.searchsorted(ys, values, side='right') / len(ys) for ys in sorted_leaves])
        means = np.array([self._leaf_means[j][leaf] for j, leaf in enumerate(leaf_row)])
        return LeafProfile(means, values, cdf)

    @staticmethod
    def subset_estimates(profile: LeafProfile, masks: np.ndarray, queries: List[Query]) -> np.ndarray:
        """
        Answer queries for one feature vector under several tree subsets.

        masks has shape (k, T); row r selects the trees of subset r.
        Returns shape (k, len(queries)).
        """
        masks = np.atleast_2d(masks).astype(float)
        counts = masks.sum(axis=1)
        if (counts == 0).any():
            raise ConformalError("no out-of-bag trees in a requested tree subset")

        out = np.empty((masks.shape[0], len(queries)))
        mean = masks @ profile.tree_means / counts
        cdf = None
        for col, query in enumerate(queries):
            if query.what == 'mean':
                out[:, col] = mean
            elif query.what == 'spread':
                second = masks @ (profile.tree_means ** 2) / counts
                out[:, col] = np.sqrt(np.maximum(second - mean ** 2, 0.0))
            elif query.what == 'quantile':
                if cdf is None:
                    cdf = (masks @ profile.cdf) / counts[:, None]
                # generalized inverse: smallest value whose pooled CDF reaches the level
                idx = np.argmax(cdf >= query.level - _CDF_TOLERANCE, axis=1)
                out[:, col] = profile.values[idx]
            else:
                raise ConformalError(f"unknown query '{query.what}'")
        return out

    def estimates(self, X, queries: List[Query], tree_subset: Optional[Sequence[int]] = None) -> np.ndarray:
        """Answer queries at every row of X using tree_subset (default: all trees)"""
        mask = np.ones(len(self.trees_), dtype=bool)
        if tree_subset is not None:
            mask = np.zeros(len(self.trees_), dtype=bool)
            mask[np.asarray(tree_subset, dtype=np.int64)] = True
        leaf_rows = self.leaf_ids(X)
        return np.vstack([self.subset_estimates(self.profile(row), mask, queries) for row in leaf_rows])

    def query(self, tree_subset: Sequence[int], x, what: str, level: Optional[float] = None) -> float:
        """Mean, spread or quantile(level) at a single feature vector from the given trees"""
        if len(tree_subset) == 0:
            raise ConformalError("no out-of-bag trees")
        return float(self.estimates(np.atleast_2d(x), [Query(what, level)], tree_subset)[0, 0])

    def oob_estimates(self, X_train, queries: List[Query]) -> np.ndarray:
        """Answer queries at each training point from its own out-of-bag trees"""
        missing = self.never_out_of_bag()
        if len(missing):
            raise ConformalError(f"index never out-of-bag: {missing[:10].tolist()}"
                                 f"{' ...' if len(missing) > 10 else ''}")
        leaf_rows = self.leaf_ids(X_train)
        return np.vstack([
            self.subset_estimates(self.profile(row), self.oob_matrix_[i], queries)
            for i, row in enumerate(leaf_rows)
        ])

    def predict(self, X) -> np.ndarray:
        return self.estimates(X, [Query('mean')])[:, 0]

    def predict_quantiles(self, X, levels: Sequence[float]) -> np.ndarray:
        return self.estimates(X, [Query('quantile', float(level)) for level in levels])

    # -------------------- persistence --------------------

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema_version': SCHEMA_VERSION,
            'params': self.get_params(),
            'n_features': self.n_features_in_,
            'y': self.y_.tolist(),
            'bags': [{'mode': bag.mode, 'indices': bag.indices.tolist()} for bag in self.bags_],
            'trees': [tree.to_dict() for tree in self.trees_],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'QuantileForest':
        version = data.get('schema_version')
        if version != SCHEMA_VERSION:
            raise ConformalError(f"unsupported forest schema version {version}")
        forest = cls(**data['params'])
        forest.bags_ = [Bag(np.asarray(b['indices'], dtype=np.int64), b['mode']) for b in data['bags']]
        forest.trees_ = [RegressionTree.from_dict(t) for t in data['trees']]
        forest._finalize(np.asarray(data['y'], dtype=float), int(data['n_features']))
        return forest


def save_forest(forest: QuantileForest, path: str):
    """Persist a fitted forest as versioned JSON"""
    try:
        with open(path, 'w') as f:
            json.dump(forest.to_dict(), f)
        logger.info(f"Forest saved to {path}")
    except OSError as e:
        logger.error(f"Failed to save forest to {path}: {e}")
        raise


def load_forest(path: str) -> QuantileForest:
    with open(path) as f:
        forest = QuantileForest.from_dict(json.load(f))
    logger.info(f"Forest loaded from {path}")
    return forest


# ==================== NESTED FAMILY PLUMBING ====================

class ForestHandle(PredictorHandle):
    """Forest-backed predictor, optionally restricted to a subset of trees"""

    def __init__(self, forest: QuantileForest, tree_subset: Optional[Sequence[int]] = None,
                 provenance: Tuple[int, ...] = ()):
        self.forest = forest
        self.tree_subset = None if tree_subset is None else np.asarray(tree_subset, dtype=np.int64)
        self.response_scale = forest.response_scale_
        self.provenance = tuple(provenance) or tuple(range(forest.n_train))

    def estimates(self, X, queries):
        return self.forest.estimates(X, queries, self.tree_subset)


class ForestFamilyBuilder:
    """Fits a quantile forest on a training subset and wraps it as a nested family"""

    def __init__(self, kind: FamilyKind, n_trees: int = 100, mode: str = BOOTSTRAP,
                 bag_size: Optional[int] = None, min_leaf: int = DEFAULT_MIN_LEAF,
                 mtry: Optional[int] = None):
        self.kind = kind
        self.forest_params = dict(n_trees=n_trees, mode=mode, bag_size=bag_size,
                                  min_leaf=min_leaf, mtry=mtry)

    def __call__(self, X, y, seed: int = 0, provenance: Tuple[int, ...] = ()) -> NestedFamily:
        forest = QuantileForest(seed=seed, **self.forest_params).fit(X, y)
        return NestedFamily(self.kind, ForestHandle(forest, provenance=provenance))
