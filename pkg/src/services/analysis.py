"""
Study statistics over a tabular dataset: error reduction from tuning the ST and AT
phases separately, fidelity correlations, training time savings of cheaper
attacks, Pareto frontiers over (standard error, adversarial error) and geometric
mean summaries. All functions are pure.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, Hashable, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import gmean, pearsonr

from src.exceptions import AnalysisError, CorrelationUndefinedError
from src.repository.datasets import TabularDataset, same_epsilon
from src.schemas import EvalRecord, HPConfig

logger = logging.getLogger(__name__)

Criterion = Literal["Error", "AdvError", "MeanError"]
CRITERIA: Tuple[Criterion, ...] = ("Error", "AdvError", "MeanError")
STUDY_RAT_PCT = (30, 50, 70)


def criterion_value(std_error: float, adv_error: float, criterion: Criterion) -> float:
    if criterion == "Error":
        return std_error
    if criterion == "AdvError":
        return adv_error
    if criterion == "MeanError":
        return (std_error + adv_error) / 2
    raise AnalysisError(f"Unknown criterion '{criterion}'")


def percent_reduction(same: float, diff: float) -> float:
    """``100 * (same - diff) / same``; zero when the tied optimum is already zero."""
    if same == 0:
        return 0.0
    return 100.0 * (same - diff) / same


def _seed_means(records: Sequence[EvalRecord], key) -> Dict[Hashable, Tuple[float, float, float]]:
    grouped = defaultdict(list)
    for record in records:
        grouped[key(record)].append(record)
    return {k: (float(np.mean([r.std_error for r in rs])), float(np.mean([r.adv_error for r in rs])),
                float(np.mean([r.train_time for r in rs])))
            for k, rs in grouped.items()}


def full_fidelity_errors(ds: TabularDataset, epsilon: float) -> Dict[HPConfig, Tuple[float, float]]:
    """Seed-averaged (std_error, adv_error) per configuration at the dataset's full fidelity."""
    if not len(ds):
        raise AnalysisError("Empty dataset")
    records = ds.select(epsilon=epsilon, fidelity=ds.full_fidelity())
    if not records:
        raise AnalysisError(f"No full-fidelity records at epsilon={epsilon}")
    return {config: (std, adv) for config, (std, adv, _) in _seed_means(records, lambda r: r.config).items()}


@dataclass(frozen=True)
class ReductionRow:
    criterion: Criterion
    rat_pct: Optional[int]
    epsilon: float
    same: float
    diff: float
    reduction: float


def _best(errors: Dict[HPConfig, Tuple[float, float]], criterion: Criterion, configs) -> float:
    values = [criterion_value(*errors[config], criterion) for config in configs]
    if not values:
        raise AnalysisError("Empty subspace")
    return min(values)


def error_reduction(ds: TabularDataset, criterion: Criterion, rat_pct: Optional[int], epsilon: float) -> ReductionRow:
    """
    Percent reduction of the best error when ST and AT may use different learning
    rate, momentum and batch size, against the best with those three tied.

    :param ds: TabularDataset: Dataset covering tied and untied configurations
    :param criterion: Criterion: Error, AdvError or MeanError
    :param rat_pct: Optional[int]: Restrict to one %RAT value; None keeps all
    :param epsilon: float: Perturbation bound
    :return: The best tied value, best untied value and their percent reduction
    """
    errors = full_fidelity_errors(ds, epsilon)
    pool = [c for c in errors if rat_pct is None or c.rat_pct == rat_pct]
    if not pool:
        raise AnalysisError(f"No configurations with rat_pct={rat_pct} at epsilon={epsilon}")
    same = _best(errors, criterion, [c for c in pool if c.tied])
    diff = _best(errors, criterion, pool)
    return ReductionRow(criterion, rat_pct, epsilon, same, diff, percent_reduction(same, diff))


@dataclass(frozen=True)
class Ecdf:
    """Empirical CDF of a sample; ``F(x)`` is the fraction of values at or below x."""
    values: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[float]) -> "Ecdf":
        values = np.sort(np.asarray(samples, dtype=float))
        if not len(values):
            raise AnalysisError("Cannot build a CDF from an empty sample")
        return cls(values)

    def __len__(self) -> int:
        return len(self.values)

    def __call__(self, x) -> np.ndarray:
        return np.searchsorted(self.values, x, side="right") / len(self.values)

    def steps(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.values, np.arange(1, len(self.values) + 1) / len(self.values)

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    @property
    def maximum(self) -> float:
        return float(self.values[-1])


def per_st_config_reduction_cdf(ds: TabularDataset, criterion: Criterion, epsilon: float,
                                rat_values: Sequence[int] = STUDY_RAT_PCT) -> Ecdf:
    """
    For every ST setting (learning rate, momentum, batch size), the percent reduction
    between the best completion whose AT phase reuses those values and the best
    completion with any AT values, optimizing %RAT, %AE and the PGD step in both.

    :param ds: TabularDataset: Dataset
    :param criterion: Criterion: Error, AdvError or MeanError
    :param epsilon: float: Perturbation bound
    :param rat_values: Sequence[int]: %RAT values considered
    :return: Empirical CDF of the reductions (negative values kept)
    """
    errors = full_fidelity_errors(ds, epsilon)
    by_st = defaultdict(list)
    for config in errors:
        if config.rat_pct in rat_values:
            by_st[config.st_hps()].append(config)
    reductions = []
    for st, configs in sorted(by_st.items()):
        tied = [c for c in configs if c.tied]
        if not tied:
            logger.debug("ST setting %s has no tied completion, skipped", st)
            continue
        reductions.append(percent_reduction(_best(errors, criterion, tied), _best(errors, criterion, configs)))
    if not reductions:
        raise AnalysisError(f"No ST settings with tied completions at epsilon={epsilon}")
    return Ecdf.from_samples(reductions)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """
    Sample Pearson correlation coefficient.

    :raises CorrelationUndefinedError: for fewer than 2 pairs or a constant input
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if len(xs) != len(ys) or len(xs) < 2:
        raise CorrelationUndefinedError(f"Need two equally long samples of size >= 2, got {len(xs)} and {len(ys)}")
    if np.ptp(xs) == 0 or np.ptp(ys) == 0:
        raise CorrelationUndefinedError("Correlation undefined for a constant sample")
    return float(np.clip(pearsonr(xs, ys)[0], -1.0, 1.0))


@dataclass(frozen=True)
class CorrelationRow:
    metric: str
    epsilon: float
    cheap_iters: int
    r: float
    cheap: Tuple[float, ...]
    reference: Tuple[float, ...]


def correlation_report(ds: TabularDataset, epsilon: float, metric: Literal["std_error", "adv_error"],
                       cheap_iters: Sequence[int] = (1, 5, 10), reference_iters: int = 20) -> List[CorrelationRow]:
    """
    Correlation of an error metric between cheap attack iteration counts and the
    reference count, pairing identical configurations trained for the maximum epochs.

    :param ds: TabularDataset: Dataset
    :param epsilon: float: Perturbation bound
    :param metric: str: std_error or adv_error
    :param cheap_iters: Sequence[int]: Cheaper attack iteration counts
    :param reference_iters: int: Reference attack iterations
    :return: One row per cheap count with r and the paired values
    """
    epochs = max(f.epochs for f in ds.fidelities())
    records = ds.select(epsilon=epsilon, predicate=lambda r: r.fidelity.epochs == epochs)
    means = _seed_means(records, lambda r: (r.config, r.fidelity.attack_iters))
    column = 0 if metric == "std_error" else 1
    reference = {config: values[column] for (config, iters), values in means.items() if iters == reference_iters}
    if not reference:
        raise AnalysisError(f"No records with attack_iters={reference_iters} at epsilon={epsilon}")
    rows = []
    for k in cheap_iters:
        pairs = sorted(((config, values[column]) for (config, iters), values in means.items()
                        if iters == k and config in reference), key=lambda item: item[0].astuple())
        cheap = tuple(value for _, value in pairs)
        ref = tuple(reference[config] for config, _ in pairs)
        rows.append(CorrelationRow(metric, epsilon, k, pearson(cheap, ref), cheap, ref))
    return rows


def method_label(attack_iters: int) -> str:
    return "FGSM" if attack_iters == 1 else f"PGD{attack_iters}"


@dataclass(frozen=True)
class TimeReduction:
    method: str
    ecdf: Optional[Ecdf]
    matched: int
    skipped: int


def time_reduction_cdf(ds: TabularDataset, baseline_iters: int = 20, cheap_iters: Sequence[int] = (1, 5, 10),
                       epsilon: Optional[float] = None) -> Dict[str, TimeReduction]:
    """
    Training time saved by a cheaper AT attack, in percent of the baseline time:
    ``100 * (t_baseline - t_cheap) / t_baseline`` per (config, epochs, epsilon).
    The ST-only arm compares against the %RAT=0 configuration with the same ST
    settings. Pairs without a counterpart are skipped and counted.

    :param ds: TabularDataset: Dataset
    :param baseline_iters: int: Attack iterations of the reference
    :param cheap_iters: Sequence[int]: Cheaper attack iteration counts
    :param epsilon: Optional[float]: Restrict to one bound
    :return: Per method label (FGSM, PGDk, ST), the CDF and the match counts
    """
    records = ds.select(epsilon=epsilon)
    times = {key: values[2] for key, values in _seed_means(
        records, lambda r: (r.config, r.fidelity.epochs, r.fidelity.attack_iters, r.epsilon)).items()}
    baseline = {(config, epochs, eps): t for (config, epochs, iters, eps), t in times.items()
                if iters == baseline_iters and config.rat_pct > 0}

    standard_only = defaultdict(list)
    for (config, epochs, _, eps), t in times.items():
        if config.rat_pct == 0:
            standard_only[(config.st_hps(), epochs, eps)].append(t)

    def lookup_cheap(k: int, config: HPConfig, epochs: int, eps: float) -> Optional[float]:
        if k == 0:
            found = [t for (st, e, ep), ts in standard_only.items()
                     if st == config.st_hps() and e == epochs and same_epsilon(ep, eps) for t in ts]
            return float(np.mean(found)) if found else None
        return times.get((config, epochs, k, eps))

    report = {}
    for k in list(cheap_iters) + [0]:
        label = method_label(k) if k else "ST"
        reductions, skipped = [], 0
        for (config, epochs, eps), t_ref in sorted(baseline.items(), key=lambda item: (item[0][0].astuple(),
                                                                                          item[0][1:])):
            t_cheap = lookup_cheap(k, config, epochs, eps)
            if t_cheap is None or t_ref <= 0:
                skipped += 1
                continue
            reductions.append(100.0 * (t_ref - t_cheap) / t_ref)
        if skipped:
            logger.info("Time reduction %s: %d unmatched pairs skipped", label, skipped)
        report[label] = TimeReduction(label, Ecdf.from_samples(reductions) if reductions else None,
                                      len(reductions), skipped)
    return report


def pareto_frontier(points: Sequence[Tuple[float, float]], labels: Optional[Sequence[Hashable]] = None) -> list:
    """
    Labels of the points no other point strictly dominates (at most as large in
    both coordinates and smaller in one), in input order. Labels default to indices.
    """
    if not len(points):
        raise AnalysisError("Pareto frontier of an empty set")
    labels = list(range(len(points))) if labels is None else list(labels)
    order = sorted(range(len(points)), key=lambda i: (points[i][0], points[i][1]))
    keep = []
    best_y = np.inf
    start = 0
    while start < len(order):
        x = points[order[start]][0]
        end = start
        while end < len(order) and points[order[end]][0] == x:
            end += 1
        group = order[start:end]
        y_min = points[group[0]][1]
        if y_min < best_y:
            keep.extend(i for i in group if points[i][1] == y_min)
            best_y = y_min
        start = end
    return [labels[i] for i in sorted(keep)]


@dataclass(frozen=True)
class Geomean:
    value: float
    used: int
    excluded: int


def geomean_reduction(values: Sequence[float]) -> Geomean:
    """
    Geometric mean of percent reductions; non-positive values are excluded and counted.
    """
    values = np.asarray(values, dtype=float)
    positive = values[values > 0]
    if not len(positive):
        raise AnalysisError("No positive reductions to average")
    return Geomean(float(gmean(positive)), len(positive), int(len(values) - len(positive)))


def error_reduction_table(ds: TabularDataset, epsilons: Optional[Sequence[float]] = None,
                          rat_values: Sequence[int] = STUDY_RAT_PCT
                          ) -> Tuple[List[ReductionRow], Dict[Criterion, Optional[Geomean]]]:
    """
    Error reduction for every criterion, %RAT value and bound, plus the geometric
    mean of the reductions per criterion (None when no reduction is positive).
    """
    epsilons = ds.epsilons() if epsilons is None else list(epsilons)
    rows = [error_reduction(ds, criterion, rat, eps)
            for criterion in CRITERIA for eps in epsilons for rat in rat_values]
    summary = {}
    for criterion in CRITERIA:
        try:
            summary[criterion] = geomean_reduction([row.reduction for row in rows if row.criterion == criterion])
        except AnalysisError:
            summary[criterion] = None
    return rows, summary


@dataclass(frozen=True)
class RatAeCell:
    rat_pct: int
    ae_pct: int
    config: HPConfig
    std_error: float
    adv_error: float


@dataclass(frozen=True)
class RatAeGrid:
    epsilon: float
    cells: Tuple[RatAeCell, ...]
    frontier: Tuple[Tuple[int, int], ...]

    @property
    def mixed_fraction(self) -> float:
        """Share of frontier cells that mix clean and adversarial examples (%AE < 100)."""
        if not self.frontier:
            return 0.0
        return sum(1 for _, ae in self.frontier if ae < 100) / len(self.frontier)


def rat_ae_grid(ds: TabularDataset, epsilon: float) -> RatAeGrid:
    """
    For every (%RAT, %AE) pair with %RAT > 0, the configuration with the lowest mean
    of standard and adversarial error at full fidelity, and the Pareto frontier of
    those cells over (standard error, adversarial error).

    :param ds: TabularDataset: Dataset
    :param epsilon: float: Perturbation bound
    :return: The grid of best cells and its frontier
    """
    errors = full_fidelity_errors(ds, epsilon)
    best: Dict[Tuple[int, int], RatAeCell] = {}
    for config in sorted(errors, key=HPConfig.astuple):
        if config.rat_pct == 0:
            continue
        std, adv = errors[config]
        key = (config.rat_pct, config.ae_pct)
        current = best.get(key)
        if current is None or (std + adv) / 2 < (current.std_error + current.adv_error) / 2:
            best[key] = RatAeCell(config.rat_pct, config.ae_pct, config, std, adv)
    if not best:
        raise AnalysisError(f"No adversarially trained configurations at epsilon={epsilon}")
    cells = tuple(best[key] for key in sorted(best))
    frontier = pareto_frontier([(c.std_error, c.adv_error) for c in cells], [(c.rat_pct, c.ae_pct) for c in cells])
    return RatAeGrid(epsilon, cells, tuple(frontier))
