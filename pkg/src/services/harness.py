"""
Deterministic replay of tuners against a tabular dataset.

The dataset acts as the evaluator: every (config, fidelity) lookup returns the
seed-averaged errors and charges the recorded training time to a simulated clock.
Per-seed incumbent traces are aggregated on a common time grid.
"""
import logging
import math
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.conf.config import settings
from src.exceptions import ConfigurationError, CoverageError
from src.repository.datasets import TabularDataset, format_key
from src.schemas import FidelityPoint, HPConfig, OptimizerSpec, SearchSpace
from src.services.optimizers import Objective, TunerState, run_optimizer
from src.services.space import FidelityGrid, enumerate_space

logger = logging.getLogger(__name__)

ReportMode = Literal["observed", "recommendation"]


@dataclass(frozen=True)
class OracleEntry:
    std_error: float
    adv_error: float
    train_time: float


class ReplayOracle:
    """
    Total lookup table over the declared space and fidelity grid at one bound.
    Multi-seed records are averaged (errors and time alike).
    """

    def __init__(self, table: Mapping[Tuple[tuple, tuple], OracleEntry], epsilon: float, space: SearchSpace):
        self._table = dict(table)
        self.epsilon = epsilon
        self.space = space

    def __len__(self) -> int:
        return len(self._table)

    def lookup(self, config: HPConfig, fidelity: FidelityPoint) -> Tuple[float, float, float]:
        entry = self._table[(config.astuple(), fidelity.astuple())]
        return entry.std_error, entry.adv_error, entry.train_time

    __call__ = lookup


def build_oracle(ds: TabularDataset, epsilon: float, space: Optional[SearchSpace] = None) -> ReplayOracle:
    """
    Build the replay oracle for one perturbation bound.

    :param ds: TabularDataset: Measured outcomes
    :param epsilon: float: Bound the tuners optimize for
    :param space: Optional[SearchSpace]: Declared space; defaults to the dataset's own
    :return: The oracle
    :raises CoverageError: when a (config, fidelity) of the space has no record, listing up to 20 of them
    """
    space = space or ds.space
    if space is None:
        raise ConfigurationError("A search space is required to build a replay oracle")
    grouped: Dict[Tuple[tuple, tuple], List] = defaultdict(list)
    for record in ds.select(epsilon=epsilon):
        grouped[(record.config.astuple(), record.fidelity.astuple())].append(record)
    table = {
        key: OracleEntry(std_error=float(np.mean([r.std_error for r in records])),
                         adv_error=float(np.mean([r.adv_error for r in records])),
                         train_time=float(np.mean([r.train_time for r in records])))
        for key, records in grouped.items()
    }

    required = [(config.astuple(), fidelity.astuple())
                for config in enumerate_space(space) for fidelity in FidelityGrid.from_space(space).points()]
    missing = [key for key in required if key not in table]
    if missing:
        raise CoverageError([format_key((config, fidelity, epsilon, "*")) for config, fidelity in missing[:20]],
                            len(missing))
    logger.debug("Replay oracle at epsilon=%g: %d entries from %d records", epsilon, len(table), len(ds))
    return ReplayOracle({key: table[key] for key in required}, epsilon, space)


@dataclass(frozen=True)
class SeedTrace:
    seed: int
    times: Tuple[float, ...]
    objective: Tuple[float, ...]
    std_error: Tuple[float, ...]
    adv_error: Tuple[float, ...]


@dataclass
class RunTrace:
    label: str
    mode: ReportMode
    budget: float
    seeds: List[SeedTrace]
    failed: Dict[int, str] = field(default_factory=dict)
    grid: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def oracle_assisted(self) -> bool:
        return self.mode == "recommendation"

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1]) if len(self.mean) else math.nan

    @property
    def final_std(self) -> float:
        return float(self.std[-1]) if len(self.std) else math.nan


def _seed_trace(seed: int, points: Iterable[Tuple[float, float, float, float]]) -> SeedTrace:
    # one point per instant, the latest wins
    by_time: Dict[float, Tuple[float, float, float]] = {}
    for t, value, std_error, adv_error in points:
        by_time[t] = (value, std_error, adv_error)
    times = sorted(by_time)
    return SeedTrace(seed, tuple(times), *(tuple(by_time[t][k] for t in times) for k in range(3)))


def seed_trace(state: TunerState, mode: ReportMode, oracle: ReplayOracle, objective: Objective) -> SeedTrace:
    """
    Incumbent trace of one tuner run: the best full-fidelity observation so far, or
    the tuner's recommendation scored at full fidelity by the oracle (not charged).
    """
    if mode == "observed":
        points = [(e.elapsed, e.value, e.std_error, e.adv_error) for e in state.incumbent_trace]
    else:
        points = []
        for t, config in state.recommendations:
            std_error, adv_error, _ = oracle.lookup(config, state.grid.full)
            points.append((t, objective.score(std_error, adv_error), std_error, adv_error))
    return _seed_trace(state.seed, points)


def aggregate(traces: Sequence[SeedTrace], budget: float,
              points: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Mean and standard deviation of incumbent values over seeds on a uniform time grid,
    carrying each seed's last observation forward. Grid instants where some seed has
    no value yet are NaN. An observation made by the evaluation that overshoots the
    budget lands on the final grid instant.

    :param traces: Sequence[SeedTrace]: Per-seed traces
    :param budget: float: End of the grid
    :param points: Optional[int]: Grid size
    :return: (grid, mean, std)
    """
    grid = np.linspace(0.0, budget, points or settings.time_grid_points)
    if not traces:
        nan = np.full(len(grid), np.nan)
        return grid, nan, nan.copy()
    values = np.full((len(traces), len(grid)), np.nan)
    for row, trace in enumerate(traces):
        if not trace.times:
            continue
        times = np.minimum(np.asarray(trace.times, dtype=float), grid[-1])
        idx = np.searchsorted(times, grid, side="right") - 1
        seen = idx >= 0
        values[row, seen] = np.asarray(trace.objective)[idx[seen]]
    complete = ~np.isnan(values).any(axis=0)
    mean = np.full(len(grid), np.nan)
    std = np.full(len(grid), np.nan)
    mean[complete] = values[:, complete].mean(axis=0)
    std[complete] = values[:, complete].std(axis=0)
    return grid, mean, std


def _replay_seed(args) -> Tuple[int, Optional[TunerState], Optional[str]]:
    spec, oracle, alpha_weight, budget, seed = args
    try:
        state = run_optimizer(spec, oracle.space, Objective(oracle.lookup, alpha_weight), budget, seed)
        return seed, state, None
    except Exception as err:
        logger.exception("[%s seed %d] replay failed", spec.label, seed)
        return seed, None, f"{type(err).__name__}: {err}"


def run_seeds(spec: OptimizerSpec, oracle: ReplayOracle, seeds: Sequence[int], budget: float,
              alpha_weight: float = 0.5, jobs: int = 1) -> Tuple[Dict[int, TunerState], Dict[int, str]]:
    """
    Run one optimizer once per seed against the oracle.

    :return: (states of the successful seeds, error message per failed seed)
    """
    if not seeds:
        raise ConfigurationError("At least one replay seed is required")
    tasks = [(spec, oracle, alpha_weight, budget, seed) for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_replay_seed, tasks))
    else:
        results = [_replay_seed(task) for task in tasks]
    states = {seed: state for seed, state, _ in results if state is not None}
    failed = {seed: error for seed, _, error in results if error is not None}
    if failed:
        logger.warning("[%s] %d of %d seeds failed and are excluded: %s", spec.label, len(failed), len(seeds),
                       sorted(failed))
    return states, failed


def build_trace(spec: OptimizerSpec, states: Mapping[int, TunerState], failed: Mapping[int, str],
                oracle: ReplayOracle, budget: float, mode: ReportMode, alpha_weight: float = 0.5) -> RunTrace:
    objective = Objective(oracle.lookup, alpha_weight)
    traces = [seed_trace(states[seed], mode, oracle, objective) for seed in sorted(states)]
    grid, mean, std = aggregate(traces, budget)
    return RunTrace(label=spec.label, mode=mode, budget=budget, seeds=traces, failed=dict(failed),
                    grid=grid, mean=mean, std=std)


def replay(spec: OptimizerSpec, oracle: ReplayOracle, seeds: Sequence[int], budget: float,
           mode: ReportMode = "observed", alpha_weight: float = 0.5, jobs: int = 1) -> RunTrace:
    """
    Replay an optimizer over several seeds and aggregate its incumbent curve.

    :param spec: OptimizerSpec: Optimizer to run
    :param oracle: ReplayOracle: Tabular evaluator
    :param seeds: Sequence[int]: Tuner seeds
    :param budget: float: Simulated seconds per seed
    :param mode: ReportMode: observed incumbents, or oracle-scored recommendations
    :param alpha_weight: float: Weight of the standard error in the objective
    :param jobs: int: Worker processes
    :return: The run trace; failed seeds are listed and left out of the aggregate
    """
    states, failed = run_seeds(spec, oracle, seeds, budget, alpha_weight, jobs)
    return build_trace(spec, states, failed, oracle, budget, mode, alpha_weight)


def _first_reach(grid: np.ndarray, mean: np.ndarray, target: float) -> float:
    reached = np.flatnonzero(mean <= target)
    return float(grid[reached[0]]) if len(reached) else math.inf


def speedup(trace_a: RunTrace, trace_b: RunTrace) -> float:
    """
    How much sooner A reaches the quality B ends with: T_B / T_A, where both times
    are the first grid instants at which the mean incumbent is at or below B's final
    mean. Infinite when A never gets there, NaN when either mean curve is undefined
    everywhere or B has no final value.
    """
    if not np.array_equal(trace_a.grid, trace_b.grid):
        raise ConfigurationError("Traces must share the same time grid")
    target = trace_b.final_mean
    if math.isnan(target) or np.isnan(trace_a.mean).all():
        return math.nan
    t_a = _first_reach(trace_a.grid, trace_a.mean, target)
    t_b = _first_reach(trace_b.grid, trace_b.mean, target)
    if math.isinf(t_a):
        return math.inf
    if t_a == 0.0:
        return 1.0 if t_b == 0.0 else math.inf
    return t_b / t_a
