"""
Benchmark Harness
Dataset ingestion, the replicate protocol (draw 1000 points, split 768/232,
calibrate, predict), the synthetic Poisson-with-outliers distribution,
width/coverage metrics, CSV/JSON reports and the `bench` command line
"""
import os
import json
import math
import time
import hashlib
import logging
import configparser
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
from dotenv import load_dotenv
from sklearn.model_selection import train_test_split

# before the library imports, which read their worker settings at import time
load_dotenv()

from prediction_sets import ConformalError, PredictionSet
from nested_families import CQR, Distributional, MeanScaled, MeanSymmetric
from quantile_forest import (
    BAG_MODES, BOOTSTRAP, DEFAULT_MIN_LEAF, SCHEMA_VERSION, SUBSAMPLE,
    ForestFamilyBuilder, QuantileForest, load_forest, save_forest,
)
from conformal import (
    AGGREGATIONS, BINOMIAL_K, CROSS, FIXED_K, HULL, JACKKNIFE_PLUS,
    CalibratedPredictor, CrossConformalPredictor, aggregated_conformal, derive_seed,
    kfold_cross, loo_cross, oob_calibrate, qoob, split_calibrate,
)

logger = logging.getLogger(__name__)

BENCH_WORKERS = int(os.getenv('BENCH_WORKERS', '0')) or None
BENCH_LOG_LEVEL = os.getenv('BENCH_LOG_LEVEL', 'INFO')
BENCH_CACHE_DIR = os.getenv('BENCH_CACHE_DIR') or None
DATASETS_DIR = os.getenv('DATASETS_DIR', '')

METHODS = (
    'sc', 'split-cqr', 'kfold-cc', 'cv+', 'loo-cc',
    'oob-cc', 'oob-ncc', 'oob-jp',
    'qoob', 'qoob-jp', 'qoob-conv', 'qoob-d',
    'subsample-agg', 'bootstrap-agg',
)
REPORT_COLUMNS = ['replicate', 'mean_width', 'mean_coverage', 'wall_time_ms']
REPORT_FORMATS = ('csv', 'json', 'both')

# sweep parameter -> ExperimentConfig field
SWEEP_PARAMETERS = {
    'trees': 'trees',
    'beta': 'beta',
    'train': 'train_size',
    'alpha': 'alpha',
}

# outlier term of the synthetic distribution
OUTLIER_PROBABILITY = 0.01
OUTLIER_SCALE = 25.0
NOISE_SCALE = 0.03


@dataclass
class ExperimentConfig:
    """
    One benchmark configuration. Exactly one of dataset / synthetic is set;
    synthetic is the size of the fresh pool drawn for every replicate.
    k is the number of folds (kfold-cc, cv+) or of resamples (*-agg).
    """
    method: str = 'qoob'
    dataset: Optional[str] = None
    synthetic: Optional[int] = None
    alpha: float = 0.1
    trees: int = 100
    beta: Optional[float] = None
    k: int = 8
    replicates: int = 1
    subsample_size: int = 1000
    train_size: int = 768
    test_size: int = 232
    min_leaf: int = DEFAULT_MIN_LEAF
    seed: int = 0
    mode: str = BOOTSTRAP
    k_mode: str = FIXED_K
    k_tilde: Optional[int] = None
    agg_size: Optional[int] = None
    timing: bool = False
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConformalError(f"unknown method '{self.method}', expected one of {', '.join(METHODS)}")
        if (self.dataset is None) == (self.synthetic is None):
            raise ConformalError("exactly one of dataset or synthetic must be given")
        if self.synthetic is not None and self.synthetic < self.subsample_size:
            raise ConformalError(f"synthetic pool of {self.synthetic} is smaller than subsample_size={self.subsample_size}")
        if not 0.0 < self.alpha < 1.0:
            raise ConformalError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.replicates < 1:
            raise ConformalError(f"replicates must be >= 1, got {self.replicates}")
        if self.train_size < 2 or self.test_size < 1:
            raise ConformalError(f"need train_size >= 2 and test_size >= 1, got {self.train_size}/{self.test_size}")
        if self.train_size + self.test_size != self.subsample_size:
            raise ConformalError(f"train_size + test_size must equal subsample_size: "
                                 f"{self.train_size} + {self.test_size} != {self.subsample_size}")
        if self.mode not in BAG_MODES:
            raise ConformalError(f"unknown bag mode '{self.mode}', expected one of {BAG_MODES}")
        if self.k_mode not in (FIXED_K, BINOMIAL_K):
            raise ConformalError(f"unknown K mode '{self.k_mode}'")
        if self.k_mode == BINOMIAL_K and self.k_tilde is None:
            raise ConformalError("binomial K mode needs k_tilde")

    @property
    def nominal_beta(self) -> float:
        return self.beta if self.beta is not None else 2 * self.alpha

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class ReplicateReport:
    replicate: int
    mean_width: float
    mean_coverage: float
    wall_time_ms: int = 0
    infinite_width: bool = False
    # mean widths of the cross set, its hull and jackknife+ for cross-style methods
    aggregation_widths: Dict[str, float] = field(default_factory=dict)
    decile_coverage: Optional[List[Optional[float]]] = None


# ==================== DATA ====================

def resolve_dataset_path(path: str) -> str:
    """Relative paths that do not exist as given are looked up under DATASETS_DIR"""
    if os.path.exists(path) or os.path.isabs(path) or not DATASETS_DIR:
        return path
    return os.path.join(DATASETS_DIR, path)


def load_dataset(path: str, min_rows: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Read a numeric CSV with a header; the last column is the target.

    Args:
        path: CSV file
        min_rows: minimum number of data rows required

    Returns:
        (X, y) with X of shape (rows, columns - 1)
    """
    path = resolve_dataset_path(path)
    if not os.path.isfile(path):
        raise ConformalError(f"dataset not found: {path}")
    try:
        frame = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ConformalError(f"could not parse {path}: {e}") from e

    if frame.shape[1] < 2:
        raise ConformalError(f"{path} needs at least 2 columns (features and target), got {frame.shape[1]}")

    numeric = frame.apply(pd.to_numeric, errors='coerce')
    bad_rows = np.flatnonzero(numeric.isna().any(axis=1).to_numpy())
    if len(bad_rows):
        # +2: one header line and 1-based numbering
        lines = ', '.join(str(line) for line in (bad_rows[:10] + 2))
        more = f" and {len(bad_rows) - 10} more" if len(bad_rows) > 10 else ''
        raise ConformalError(f"non-numeric or missing cells in {path} at line(s) {lines}{more}")

    if len(frame) < min_rows:
        raise ConformalError(f"{path} has {len(frame)} rows, need at least {min_rows}")

    values = numeric.to_numpy(dtype=float)
    logger.info(f"Loaded {path}: N={values.shape[0]}, d={values.shape[1] - 1}")
    return values[:, :-1], values[:, -1]


def synthetic_rate(x) -> np.ndarray:
    """Poisson rate sin^2(x) + 0.1"""
    return np.sin(np.asarray(x, dtype=float)) ** 2 + 0.1


def synthetic_components(n: int, seed: int) -> Dict[str, np.ndarray]:
    """All draws behind a synthetic sample, for inspection"""
    if n < 1:
        raise ConformalError(f"synthetic sample size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.0, 1.0, size=n)
    counts = rng.poisson(synthetic_rate(x)).astype(float)
    eps1 = rng.standard_normal(n)
    eps2 = rng.standard_normal(n)
    outlier = rng.uniform(0.0, 1.0, size=n) < OUTLIER_PROBABILITY
    y = counts + NOISE_SCALE * x * eps1 + OUTLIER_SCALE * outlier * eps2
    return {'x': x, 'counts': counts, 'eps1': eps1, 'eps2': eps2, 'outlier': outlier, 'y': y}


def synthetic_sample(n: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """X ~ Unif[0, 1], Y ~ Pois(sin^2 X + 0.1) + 0.03 X e1 + 25 1{u < 0.01} e2"""
    draws = synthetic_components(n, seed)
    return draws['x'][:, None], draws['y']


# ==================== METHODS ====================

def cached_forest(X: np.ndarray, y: np.ndarray, params: Dict[str, Any], seed: int,
                  cache_dir: Optional[str]) -> QuantileForest:
    """Fit a forest, reusing a JSON copy from cache_dir when the data and parameters match"""
    if not cache_dir:
        return QuantileForest(seed=seed, **params).fit(X, y)

    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(X, dtype=float).tobytes())
    digest.update(np.ascontiguousarray(y, dtype=float).tobytes())
    digest.update(json.dumps({**params, 'seed': seed, 'schema': SCHEMA_VERSION}, sort_keys=True).encode())
    path = os.path.join(cache_dir, f"forest-{digest.hexdigest()[:24]}.json")

    if os.path.exists(path):
        try:
            return load_forest(path)
        except (OSError, ValueError, KeyError) as e:
            logger.warning(f"Ignoring unreadable cached forest {path}: {e}")

    forest = QuantileForest(seed=seed, **params).fit(X, y)
    os.makedirs(cache_dir, exist_ok=True)
    save_forest(forest, path)
    return forest


def build_predictor(config: ExperimentConfig, X: np.ndarray, y: np.ndarray, seed: int) -> CalibratedPredictor:
    """Fit and calibrate the configured method on one training split"""
    method, alpha, beta = config.method, config.alpha, config.nominal_beta
    forest_params = dict(n_trees=config.trees, mode=config.mode, bag_size=None, min_leaf=config.min_leaf, mtry=None)

    if method in ('sc', 'split-cqr'):
        kind = MeanSymmetric() if method == 'sc' else CQR(beta)
        X_fit, X_cal, y_fit, y_cal = train_test_split(X, y, train_size=0.5, random_state=seed)
        family = ForestFamilyBuilder(kind, **forest_params)(X_fit, y_fit, seed=seed)
        return split_calibrate(family, X_cal, y_cal, alpha)

    if method in ('kfold-cc', 'cv+'):
        aggregation = CROSS if method == 'kfold-cc' else JACKKNIFE_PLUS
        return kfold_cross(X, y, ForestFamilyBuilder(MeanSymmetric(), **forest_params), config.k, alpha,
                           seed=seed, aggregation=aggregation)

    if method == 'loo-cc':
        return loo_cross(X, y, ForestFamilyBuilder(MeanSymmetric(), **forest_params), alpha, seed=seed)

    if method in ('subsample-agg', 'bootstrap-agg'):
        mode = SUBSAMPLE if method == 'subsample-agg' else BOOTSTRAP
        m = config.agg_size or (len(y) // 2 if mode == SUBSAMPLE else len(y))
        return aggregated_conformal(X, y, ForestFamilyBuilder(MeanSymmetric(), **forest_params),
                                    config.k, mode, m, alpha, seed=seed)

    # out-of-bag methods share one forest per replicate
    forest = None
    if config.k_mode == FIXED_K:
        forest = cached_forest(X, y, forest_params, seed, config.cache_dir)
    oob_args = dict(forest=forest, n_trees=config.trees, mode=config.mode, min_leaf=config.min_leaf,
                    seed=seed, k_mode=config.k_mode, k_tilde=config.k_tilde)

    if method in ('qoob', 'qoob-jp', 'qoob-conv'):
        aggregation = {'qoob': CROSS, 'qoob-jp': JACKKNIFE_PLUS, 'qoob-conv': HULL}[method]
        return qoob(X, y, alpha, beta=beta, aggregation=aggregation, **oob_args)

    kind = {
        'oob-cc': MeanSymmetric(),
        'oob-jp': MeanSymmetric(),
        'oob-ncc': MeanScaled(),
        'qoob-d': Distributional(),
    }[method]
    aggregation = JACKKNIFE_PLUS if method == 'oob-jp' else CROSS
    return oob_calibrate(X, y, kind, alpha, aggregation=aggregation, method=method, **oob_args)


# ==================== REPLICATES ====================

def _predict_test_set(predictor: CalibratedPredictor, X_test: np.ndarray) -> Tuple[List[PredictionSet], Dict[str, float]]:
    if not isinstance(predictor, CrossConformalPredictor):
        return predictor.predict_many(X_test), {}

    with ThreadPoolExecutor(max_workers=BENCH_WORKERS) as executor:
        all_sets = list(executor.map(predictor.predict_all, X_test))
    sets = [by_aggregation[predictor.aggregation] for by_aggregation in all_sets]
    widths = {
        aggregation: float(np.mean([by_aggregation[aggregation].width for by_aggregation in all_sets]))
        for aggregation in AGGREGATIONS
    }
    return sets, widths


def _decile_coverage(x: np.ndarray, covered: np.ndarray) -> List[Optional[float]]:
    bins = np.clip((x * 10).astype(int), 0, 9)
    return [float(covered[bins == b].mean()) if (bins == b).any() else None for b in range(10)]


def run_replicate(config: ExperimentConfig, replicate: int,
                  pool: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ReplicateReport:
    """
    One replicate: draw subsample_size points without replacement, split into
    train/test, calibrate on train and score every test point.
    """
    seed = derive_seed(config.seed, replicate)
    if pool is None:
        X_pool, y_pool = synthetic_sample(config.synthetic, seed)
    else:
        X_pool, y_pool = pool
    if len(y_pool) < config.subsample_size:
        raise ConformalError(f"dataset has {len(y_pool)} rows, need at least {config.subsample_size}")

    rng = np.random.default_rng(seed)
    rows = rng.choice(len(y_pool), size=config.subsample_size, replace=False)
    X_train, X_test, y_train, y_test = train_test_split(
        X_pool[rows], y_pool[rows], train_size=config.train_size, test_size=config.test_size, random_state=seed
    )

    started = time.perf_counter()
    predictor = build_predictor(config, X_train, y_train, seed)
    sets, aggregation_widths = _predict_test_set(predictor, X_test)
    elapsed_ms = int(round((time.perf_counter() - started) * 1000))

    if len(sets) != config.test_size:
        raise ConformalError(f"replicate {replicate} scored {len(sets)} test points, expected {config.test_size}")

    widths = np.array([s.width for s in sets])
    covered = np.array([s.contains(label) for s, label in zip(sets, y_test)], dtype=float)
    infinite = bool(np.isinf(widths).any())
    if infinite:
        logger.warning(f"Replicate {replicate}: {int(np.isinf(widths).sum())} test points got the full line")

    report = ReplicateReport(
        replicate=replicate,
        mean_width=float(widths.mean()),
        mean_coverage=float(covered.mean()),
        wall_time_ms=elapsed_ms if config.timing else 0,
        infinite_width=infinite,
        aggregation_widths=aggregation_widths,
        decile_coverage=_decile_coverage(X_test[:, 0], covered) if config.synthetic is not None else None,
    )
    logger.info(f"Replicate {replicate} ({config.method}): width={report.mean_width:.4f}, "
                f"coverage={report.mean_coverage:.4f}")
    return report


def summarize(config: ExperimentConfig, reports: Sequence[ReplicateReport]) -> Dict[str, Any]:
    """
    Average width and coverage across replicates.

    sd_of_average is the standard error of the average (sample SD of the
    replicate means divided by sqrt(R)); sd_of_replicates is the sample SD
    itself. Both are None with a single replicate or infinite widths.
    """
    widths = np.array([r.mean_width for r in reports])
    coverages = np.array([r.mean_coverage for r in reports])
    count = len(reports)
    finite = bool(np.isfinite(widths).all())

    def dispersion(values: np.ndarray, usable: bool) -> Tuple[Optional[float], Optional[float]]:
        if count < 2 or not usable:
            return None, None
        sd = float(np.std(values, ddof=1))
        return sd, sd / math.sqrt(count)

    sd_width, se_width = dispersion(widths, finite)
    sd_coverage, se_coverage = dispersion(coverages, True)

    flags = []
    if not finite:
        flags.append('infinite_width')

    summary = {
        'method': config.method,
        'config': config.to_dict(),
        'replicates': count,
        'ave_mean_width': float(widths.mean()),
        'sd_of_average': se_width,
        'sd_of_replicates': sd_width,
        'ave_mean_coverage': float(coverages.mean()),
        'sd_of_coverage_average': se_coverage,
        'sd_of_coverage_replicates': sd_coverage,
        'flags': flags,
        'infinite_width_replicates': [r.replicate for r in reports if r.infinite_width],
    }

    if reports and reports[0].aggregation_widths:
        summary['aggregation_widths'] = {
            aggregation: float(np.mean([r.aggregation_widths[aggregation] for r in reports]))
            for aggregation in reports[0].aggregation_widths
        }
    if reports and reports[0].decile_coverage is not None:
        per_bin = np.array([[np.nan if v is None else v for v in r.decile_coverage] for r in reports])
        summary['decile_coverage'] = [
            None if np.isnan(column).all() else float(np.nanmean(column)) for column in per_bin.T
        ]
    return summary


def run_replicates(config: ExperimentConfig, pool: Optional[Tuple[np.ndarray, np.ndarray]] = None,
                   max_workers: Optional[int] = None) -> Tuple[List[ReplicateReport], Dict[str, Any]]:
    """
    Run every replicate of config in a thread pool. Seeds derive from
    (config.seed, replicate id), so the worker count never changes results.
    """
    if pool is None and config.dataset is not None:
        pool = load_dataset(config.dataset, min_rows=config.subsample_size)

    logger.info(f"Running {config.replicates} replicate(s) of {config.method} "
                f"on {config.dataset or f'synthetic({config.synthetic})'}")
    with ThreadPoolExecutor(max_workers=max_workers or BENCH_WORKERS) as executor:
        reports = list(executor.map(lambda r: run_replicate(config, r, pool), range(config.replicates)))

    summary = summarize(config, reports)
    if summary['flags']:
        logger.warning(f"Run flagged: {summary['flags']}")
    return reports, summary


def run_sweep(config: ExperimentConfig, parameter: str, values: Sequence[float],
              max_workers: Optional[int] = None) -> pd.DataFrame:
    """Repeat run_replicates for each value of one parameter; one summary row per value"""
    if parameter not in SWEEP_PARAMETERS:
        raise ConformalError(f"unknown sweep parameter '{parameter}', expected one of {list(SWEEP_PARAMETERS)}")

    pool = None
    if config.dataset is not None:
        pool = load_dataset(config.dataset, min_rows=config.subsample_size)

    rows = []
    for value in values:
        if parameter == 'train':
            varied = replace(config, train_size=int(value), test_size=config.subsample_size - int(value))
        elif parameter == 'trees':
            varied = replace(config, trees=int(value))
        else:
            varied = replace(config, **{SWEEP_PARAMETERS[parameter]: float(value)})
        _, summary = run_replicates(varied, pool=pool, max_workers=max_workers)
        rows.append({
            'parameter': parameter,
            'value': value,
            'method': config.method,
            'ave_mean_width': summary['ave_mean_width'],
            'sd_of_average': summary['sd_of_average'],
            'ave_mean_coverage': summary['ave_mean_coverage'],
            'flags': ';'.join(summary['flags']),
        })
    return pd.DataFrame(rows)


# ==================== REPORTS ====================

def report(reports: Sequence[ReplicateReport], summary: Dict[str, Any], fmt: str, out_dir: str) -> List[str]:
    """
    Write replicates.csv (one plot-ready row per replicate) and/or
    summary.json (summary plus every replicate report).
    """
    if fmt not in REPORT_FORMATS:
        raise ConformalError(f"unknown report format '{fmt}', expected one of {REPORT_FORMATS}")
    os.makedirs(out_dir, exist_ok=True)
    written = []

    if fmt in ('csv', 'both'):
        path = os.path.join(out_dir, 'replicates.csv')
        frame = pd.DataFrame([{column: getattr(r, column) for column in REPORT_COLUMNS} for r in reports],
                             columns=REPORT_COLUMNS)
        frame.to_csv(path, index=False)
        written.append(path)

    if fmt in ('json', 'both'):
        path = os.path.join(out_dir, 'summary.json')
        payload = dict(summary, replicate_reports=[asdict(r) for r in reports])
        with open(path, 'w') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        written.append(path)

    logger.info(f"Reports written: {', '.join(written)}")
    return written


# ==================== CLI ====================

# INI keys follow flag names; these flags store under a different parameter name
_INI_ALIASES = {
    'subsample': 'subsample_size',
    'train': 'train_size',
    'test': 'test_size',
    'out': 'out_dir',
    'format': 'fmt',
}


def _load_ini(ctx: click.Context, param: click.Parameter, value: Optional[str]):
    """Feed the [bench] section of an INI file into click's default_map"""
    if value is None:
        return None
    parser = configparser.ConfigParser()
    try:
        parser.read(value)
    except configparser.Error as e:
        raise click.BadParameter(f"could not parse {value}: {e}") from e
    if not parser.has_section('bench'):
        raise click.BadParameter(f"{value} has no [bench] section")
    defaults = {}
    for key, item in parser.items('bench'):
        key = key.replace('-', '_')
        defaults[_INI_ALIASES.get(key, key)] = item
    ctx.default_map = {**(ctx.default_map or {}), **defaults}
    return value


def _experiment_options(command):
    options = [
        click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
                     callback=_load_ini, is_eager=True, expose_value=False,
                     help='INI file with a [bench] section of flag defaults'),
        click.option('--dataset', type=str, default=None, help='Numeric CSV, target in the last column'),
        click.option('--synthetic', type=int, default=None, help='Draw a synthetic pool of N points per replicate'),
        click.option('--method', type=click.Choice(METHODS), default='qoob', show_default=True),
        click.option('--alpha', type=float, default=0.1, show_default=True),
        click.option('--trees', type=int, default=100, show_default=True),
        click.option('--beta', type=float, default=None, help='Nominal quantile level (default 2 alpha)'),
        click.option('--k', type=int, default=8, show_default=True, help='Folds or resamples'),
        click.option('--replicates', type=int, default=1, show_default=True),
        click.option('--subsample', 'subsample_size', type=int, default=1000, show_default=True),
        click.option('--train', 'train_size', type=int, default=768, show_default=True),
        click.option('--test', 'test_size', type=int, default=232, show_default=True),
        click.option('--min-leaf', type=int, default=DEFAULT_MIN_LEAF, show_default=True),
        click.option('--seed', type=int, default=0, show_default=True),
        click.option('--mode', type=click.Choice(BAG_MODES), default=BOOTSTRAP, show_default=True),
        click.option('--k-mode', type=click.Choice([FIXED_K, BINOMIAL_K]), default=FIXED_K, show_default=True),
        click.option('--k-tilde', type=int, default=None),
        click.option('--agg-size', type=int, default=None, help='Resample size m for *-agg methods'),
        click.option('--timing/--no-timing', default=False, help='Record wall time (breaks byte-identical output)'),
        click.option('--cache-dir', type=click.Path(file_okay=False), default=BENCH_CACHE_DIR),
        click.option('--workers', type=int, default=BENCH_WORKERS),
        click.option('--out', 'out_dir', type=click.Path(file_okay=False), default='results', show_default=True),
    ]
    for option in reversed(options):
        command = option(command)
    return command


def _config_from_options(options: Dict[str, Any]) -> ExperimentConfig:
    fields = {key: value for key, value in options.items() if key not in ('workers', 'out_dir', 'fmt', 'parameter', 'values')}
    return ExperimentConfig(**fields)


@click.group()
@click.option('--log-level', default=BENCH_LOG_LEVEL, show_default=True,
              type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False))
def cli(log_level: str):
    """Nested conformal prediction benchmarks"""
    logging.basicConfig(level=getattr(logging, log_level.upper()),
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    logger.debug("✓ Logging configured")


@cli.command()
@_experiment_options
@click.option('--format', 'fmt', type=click.Choice(REPORT_FORMATS), default='both', show_default=True)
def run(**options):
    """Run replicates of one method and write per-replicate and summary reports"""
    try:
        config = _config_from_options(options)
        reports, summary = run_replicates(config, max_workers=options['workers'])
        written = report(reports, summary, options['fmt'], options['out_dir'])
    except (ConformalError, ValueError, OSError) as e:
        logger.error(f"bench run failed: {e}")
        raise click.ClickException(str(e)) from e

    click.echo(f"{config.method}: ave_mean_width={summary['ave_mean_width']:.4f} "
               f"ave_mean_coverage={summary['ave_mean_coverage']:.4f}"
               + (f" flags={','.join(summary['flags'])}" if summary['flags'] else ''))
    for path in written:
        click.echo(f"✓ {path}")


@cli.command()
@_experiment_options
@click.option('--parameter', type=click.Choice(list(SWEEP_PARAMETERS)), required=True)
@click.option('--values', required=True, help='Comma-separated values, e.g. 50,100,200')
def sweep(**options):
    """Repeat a run over values of one parameter and write sweep.csv"""
    try:
        values = [float(v) for v in options['values'].split(',') if v.strip()]
        if not values:
            raise ConformalError("no sweep values given")
        config = _config_from_options(options)
        frame = run_sweep(config, options['parameter'], values, max_workers=options['workers'])
        os.makedirs(options['out_dir'], exist_ok=True)
        path = os.path.join(options['out_dir'], 'sweep.csv')
        frame.to_csv(path, index=False)
    except (ConformalError, ValueError, OSError) as e:
        logger.error(f"bench sweep failed: {e}")
        raise click.ClickException(str(e)) from e
    click.echo(f"✓ {path}")


if __name__ == '__main__':
    cli()
