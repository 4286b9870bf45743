"""
Hyper-parameter tuners: random search, GP/EI Bayesian optimization, HyperBand over
epochs, and a cost-aware multi-fidelity tuner that may lower epochs and attack
iterations (knowledge gradient per unit of predicted cost).

Every tuner works against an :class:`Objective` and spends a budget of
evaluator-reported cost; the last evaluation may overshoot the budget.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.conf.config import settings
from src.exceptions import ConfigurationError, FitError
from src.schemas import FidelityPoint, HPConfig, OptimizerSpec, SearchSpace
from src.services import surrogate
from src.services.space import FidelityGrid, enumerate_space

logger = logging.getLogger(__name__)

Evaluator = Callable[[HPConfig, FidelityPoint], Tuple[float, float, float]]


@dataclass(frozen=True)
class Evaluation:
    config: HPConfig
    fidelity: FidelityPoint
    value: float
    std_error: float
    adv_error: float
    cost: float
    elapsed: float


@dataclass(frozen=True)
class Objective:
    """
    Weighted robustness objective ``alpha_weight * std_error + (1 - alpha_weight) * adv_error``.

    The evaluator returns (std_error, adv_error, cost_seconds) for a config at a fidelity.
    """
    evaluator: Evaluator
    alpha_weight: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha_weight <= 1.0:
            raise ConfigurationError(f"alpha_weight {self.alpha_weight} outside [0, 1]")

    def score(self, std_error: float, adv_error: float) -> float:
        return self.alpha_weight * std_error + (1.0 - self.alpha_weight) * adv_error

    def __call__(self, config: HPConfig, fidelity: FidelityPoint) -> Tuple[float, float, float, float]:
        std_error, adv_error, cost = self.evaluator(config, fidelity)
        return self.score(std_error, adv_error), std_error, adv_error, cost


@dataclass
class TunerState:
    """
    Everything a tuner did: the evaluation history with cumulative cost, the
    incumbent (best full-fidelity observation) and its trace, and the
    configuration the tuner would recommend after each step.
    """
    label: str
    seed: int
    budget: float
    grid: FidelityGrid
    history: List[Evaluation] = field(default_factory=list)
    incumbent: Optional[Evaluation] = None
    incumbent_trace: List[Evaluation] = field(default_factory=list)
    recommendations: List[Tuple[float, HPConfig]] = field(default_factory=list)
    elapsed: float = 0.0
    exhausted: bool = False
    fit_failures: int = 0

    @property
    def has_budget(self) -> bool:
        return self.elapsed < self.budget and not math.isclose(self.elapsed, self.budget, rel_tol=1e-9)

    def observe(self, objective: Objective, config: HPConfig, fidelity: FidelityPoint) -> Evaluation:
        value, std_error, adv_error, cost = objective(config, fidelity)
        self.elapsed += cost
        evaluation = Evaluation(config, fidelity, value, std_error, adv_error, cost, self.elapsed)
        self.history.append(evaluation)
        if self.grid.is_full(fidelity) and (self.incumbent is None or value < self.incumbent.value):
            self.incumbent = evaluation
            self.incumbent_trace.append(evaluation)
        logger.debug("[%s seed %d] t=%.3f value=%.4f at %s", self.label, self.seed, self.elapsed, value,
                     fidelity.astuple())
        return evaluation

    def recommend(self, config: HPConfig) -> None:
        self.recommendations.append((self.elapsed, config))

    def recommend_best_observed(self) -> None:
        if self.incumbent is not None:
            self.recommend(self.incumbent.config)
        elif self.history:
            self.recommend(min(self.history, key=lambda e: e.value).config)

    @property
    def total_cost(self) -> float:
        return float(sum(e.cost for e in self.history))


def _setup(space: SearchSpace, budget: float, seed: int, label: str):
    if budget <= 0:
        raise ConfigurationError(f"Budget must be positive, got {budget}")
    configs = enumerate_space(space)
    grid = FidelityGrid.from_space(space)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(configs))
    state = TunerState(label=label, seed=seed, budget=budget, grid=grid)
    return configs, grid, rng, order, state


def _candidate_indices(n_configs: int, rng: np.random.Generator) -> np.ndarray:
    if n_configs <= settings.max_candidates:
        return np.arange(n_configs)
    return np.sort(rng.choice(n_configs, size=settings.max_candidates, replace=False))


def random_search(space: SearchSpace, objective: Objective, budget: float, seed: int,
                  label: str = "random") -> TunerState:
    """
    Evaluate configurations in a seeded random order, without replacement, at full fidelity.

    :param space: SearchSpace: Search space
    :param objective: Objective: Weighted objective
    :param budget: float: Cost budget in seconds
    :param seed: int: Seed of the pick order
    :param label: str: Name used in logs and traces
    :return: The tuner state; ``exhausted`` is set when the space ran out first
    """
    configs, grid, _, order, state = _setup(space, budget, seed, label)
    for index in order:
        if not state.has_budget:
            break
        state.observe(objective, configs[index], grid.full)
        state.recommend_best_observed()
    else:
        state.exhausted = state.has_budget
    if state.exhausted:
        logger.info("[%s seed %d] space exhausted after %d evaluations", label, seed, len(state.history))
    return state


def bo_ei(space: SearchSpace, objective: Objective, budget: float, seed: int, init_design_size: int = 5,
          label: str = "bo_ei") -> TunerState:
    """
    Bayesian optimization with expected improvement at full fidelity.

    The initial design takes the first ``init_design_size`` picks of the same
    seeded order random search uses; afterwards each round fits a GP on all
    observations and evaluates the unobserved candidate of maximal EI.

    :param space: SearchSpace: Search space
    :param objective: Objective: Weighted objective
    :param budget: float: Cost budget in seconds
    :param seed: int: Seed of the design, candidate subsample and GP restarts
    :param init_design_size: int: Number of random configurations before the model takes over
    :param label: str: Name used in logs and traces
    :return: The tuner state
    """
    if init_design_size < 2:
        raise ConfigurationError("init_design_size must be at least 2")
    configs, grid, rng, order, state = _setup(space, budget, seed, label)
    candidates = _candidate_indices(len(configs), rng)
    encoder = surrogate.SpaceEncoder.from_space(space)
    encoded = encoder.encode_many([configs[i] for i in candidates])
    observed: Dict[int, float] = {}

    def evaluate(index: int) -> None:
        observed[index] = state.observe(objective, configs[index], grid.full).value
        state.recommend_best_observed()

    for index in order[:init_design_size]:
        if not state.has_budget:
            return state
        evaluate(int(index))

    while state.has_budget:
        if len(observed) == len(configs):
            state.exhausted = True
            break
        open_mask = np.array([i not in observed for i in candidates])
        pick = None
        if open_mask.any():
            indices = list(observed)
            try:
                model = surrogate.fit(encoder.encode_many([configs[i] for i in indices]),
                                      np.array([observed[i] for i in indices]), seed=seed)
                ei = surrogate.expected_improvement(model, encoded[open_mask], min(observed.values()))
                pick = int(candidates[open_mask][int(np.argmax(ei))])
            except FitError as err:
                state.fit_failures += 1
                logger.warning("[%s seed %d] GP fit failed, sampling at random: %s", label, seed, err.detail)
        if pick is None:
            pick = next(int(i) for i in order if int(i) not in observed)
        evaluate(pick)
    return state


@dataclass(frozen=True)
class Bracket:
    s: int
    rungs: Tuple[Tuple[int, float], ...]

    @property
    def n(self) -> int:
        return self.rungs[0][0]

    @property
    def r(self) -> float:
        return self.rungs[0][1]


def hyperband_schedule(R: int, eta: int) -> List[Bracket]:
    """
    HyperBand bracket table. For s = s_max..0 (s_max = floor(log_eta R)) a bracket
    starts n = ceil((s_max + 1) / (s + 1) * eta^s) configs at r = R * eta^-s; every
    rung keeps floor(n_i / eta) of them at eta times the resource.

    :param R: int: Maximum resource (epochs)
    :param eta: int: Reduction factor, at least 2
    :return: Brackets, most exploratory first
    """
    if eta < 2 or R < 1:
        raise ConfigurationError(f"Invalid HyperBand parameters R={R}, eta={eta}")
    s_max = 0
    while eta ** (s_max + 1) <= R:
        s_max += 1
    brackets = []
    for s in range(s_max, -1, -1):
        n = -(-(s_max + 1) * eta ** s // (s + 1))
        r = R / eta ** s
        rungs = []
        for i in range(s + 1):
            rungs.append((n, r * eta ** i))
            n //= eta
        brackets.append(Bracket(s, tuple(rungs)))
    return brackets


def snap_level(resource: float, levels: Sequence[int]) -> int:
    """Nearest grid level to a fractional resource, ties going to the lower level."""
    return min(levels, key=lambda level: (abs(level - resource), level))


def hyperband(space: SearchSpace, objective: Objective, budget: float, seed: int, R: Optional[int] = None,
              eta: int = 2, label: str = "hyperband") -> TunerState:
    """
    HyperBand with epochs as the resource; attack iterations stay at their maximum.
    Brackets repeat until the budget is spent.

    :param space: SearchSpace: Search space
    :param objective: Objective: Weighted objective
    :param budget: float: Cost budget in seconds
    :param seed: int: Seed of the config draws
    :param R: Optional[int]: Maximum epochs; must equal the grid maximum
    :param eta: int: Reduction factor
    :param label: str: Name used in logs and traces
    :return: The tuner state
    """
    configs, grid, rng, _, state = _setup(space, budget, seed, label)
    R = grid.epochs_max if R is None else R
    if R != grid.epochs_max:
        raise ConfigurationError(f"HyperBand R={R} must equal the maximum epochs {grid.epochs_max}")
    schedule = hyperband_schedule(R, eta)

    while True:
        spent_before = state.elapsed
        for bracket in schedule:
            picks = rng.permutation(len(configs))[:bracket.n]
            survivors = [configs[i] for i in picks]
            for rung, (n_i, r_i) in enumerate(bracket.rungs):
                fidelity = FidelityPoint(epochs=snap_level(r_i, grid.epochs), attack_iters=grid.iters_max)
                scored = []
                for config in survivors[:n_i]:
                    if not state.has_budget:
                        return state
                    scored.append((state.observe(objective, config, fidelity).value, config))
                    state.recommend_best_observed()
                if rung + 1 < len(bracket.rungs):
                    keep = bracket.rungs[rung + 1][0]
                    survivors = [config for _, config in sorted(scored, key=lambda item: item[0])[:keep]]
        # a free pass can never spend the budget
        if state.elapsed <= spent_before:
            state.exhausted = True
            logger.info("[%s seed %d] schedule pass charged no cost, stopping", label, seed)
            return state


class CostModel:
    """
    Predicted training cost of (config, fidelity).

    The prior is ``epochs * (c0 + rat_pct/100 * ae_pct/100 * attack_iters)``; once costs
    are observed it is rescaled by the mean observed/prior ratio of the fidelity
    level, or of all levels when that level has no data yet.
    """

    def __init__(self, c0: Optional[float] = None):
        self.c0 = settings.cost_c0 if c0 is None else c0
        self._ratios: Dict[FidelityPoint, List[float]] = {}

    def prior(self, config: HPConfig, fidelity: FidelityPoint) -> float:
        attack = config.rat_pct / 100 * config.ae_pct / 100 * fidelity.attack_iters
        return max(fidelity.epochs * (self.c0 + attack), 1e-12)

    def observe(self, config: HPConfig, fidelity: FidelityPoint, cost: float) -> None:
        self._ratios.setdefault(fidelity, []).append(cost / self.prior(config, fidelity))

    def predict(self, config: HPConfig, fidelity: FidelityPoint) -> float:
        ratios = self._ratios.get(fidelity)
        if not ratios:
            ratios = [ratio for values in self._ratios.values() for ratio in values]
        scale = float(np.mean(ratios)) if ratios else 1.0
        return max(self.prior(config, fidelity) * scale, 1e-12)


def fantasy_normals(seed: int, count: int) -> np.ndarray:
    # antithetic pairs keep the Monte-Carlo knowledge gradient non-negative
    half = np.random.default_rng(seed).standard_normal((count + 1) // 2)
    return np.concatenate([half, -half])[:count]


def knowledge_gradient(model: surrogate.GPModel, discretization: np.ndarray, proposals: np.ndarray,
                       normals: np.ndarray) -> np.ndarray:
    """
    One-step knowledge gradient of each proposal: expected drop of the minimum
    posterior mean over ``discretization`` after observing the proposal, estimated
    with the given standard normal draws.

    :param model: GPModel: Fitted joint GP
    :param discretization: np.ndarray: Encoded full-fidelity points whose minimum is tracked
    :param proposals: np.ndarray: Encoded (config, fidelity) candidates
    :param normals: np.ndarray: Fantasy draws shared by all proposals
    :return: Non-negative value per proposal
    """
    mean_a, _ = surrogate.predict(model, discretization)
    _, var_p = surrogate.predict(model, proposals)
    cross = surrogate.posterior_cross_covariance(model, discretization, proposals)
    noise = model.noise_variance * model.y_std ** 2
    best = float(np.min(mean_a))
    values = np.zeros(len(proposals))
    for j in range(len(proposals)):
        denominator = math.sqrt(var_p[j] + noise)
        if denominator < 1e-12:
            continue
        sigma = cross[:, j] / denominator
        fantasies = mean_a[:, None] + sigma[:, None] * normals[None, :]
        values[j] = best - float(np.mean(np.min(fantasies, axis=0)))
    return np.maximum(values, 0.0)


def mf_costaware(space: SearchSpace, objective: Objective, fidelity_dims: Sequence[str], budget: float,
                 seed: int, init_design_size: int = 5, label: str = "mf") -> TunerState:
    """
    Cost-aware multi-fidelity Bayesian optimization.

    A single GP models the objective jointly over configuration and the chosen
    fidelity dimensions (dimensions not chosen stay at their maximum). Each round
    evaluates the (config, fidelity) pair maximizing knowledge gradient divided by
    predicted cost; when every knowledge gradient is zero the cheapest unobserved
    proposal is taken. After each fit the tuner recommends the argmin of the
    posterior mean at full fidelity.

    :param space: SearchSpace: Search space
    :param objective: Objective: Weighted objective
    :param fidelity_dims: Sequence[str]: Subset of {epochs, attack_iters} the tuner may lower
    :param budget: float: Cost budget in seconds
    :param seed: int: Seed of the design, subsamples, fantasies and GP restarts
    :param init_design_size: int: Random configurations evaluated at the cheapest level first
    :param label: str: Name used in logs and traces
    :return: The tuner state
    """
    if init_design_size < 2:
        raise ConfigurationError("init_design_size must be at least 2")
    configs, grid, rng, order, state = _setup(space, budget, seed, label)
    levels = grid.levels(fidelity_dims)
    candidates = _candidate_indices(len(configs), rng)
    encoder = surrogate.SpaceEncoder.from_space(space, fidelity_dims)
    cost_model = CostModel()
    normals = fantasy_normals(seed, settings.kg_fantasies)
    observed: Dict[Tuple[int, FidelityPoint], float] = {}

    def evaluate(index: int, fidelity: FidelityPoint) -> None:
        evaluation = state.observe(objective, configs[index], fidelity)
        observed[(index, fidelity)] = evaluation.value
        cost_model.observe(configs[index], fidelity, evaluation.cost)

    for index in order[:init_design_size]:
        if not state.has_budget:
            return state
        evaluate(int(index), levels[0])
        state.recommend_best_observed()

    full_points = encoder.encode_many([configs[i] for i in candidates], grid.full)
    round_ = 0
    while state.has_budget:
        round_ += 1
        keys = list(observed)
        try:
            model = surrogate.fit(
                encoder.encode_many([configs[i] for i, _ in keys], [f for _, f in keys]),
                np.array([observed[k] for k in keys]), seed=seed)
        except FitError as err:
            state.fit_failures += 1
            logger.warning("[%s seed %d] GP fit failed, sampling at random: %s", label, seed, err.detail)
            pending = [int(i) for i in order if (int(i), grid.full) not in observed]
            if not pending:
                state.exhausted = True
                break
            evaluate(pending[0], grid.full)
            state.recommend_best_observed()
            continue

        mean_full, _ = surrogate.predict(model, full_points)
        state.recommend(configs[int(candidates[int(np.argmin(mean_full))])])

        round_rng = np.random.default_rng([seed, round_])
        sample = round_rng.choice(len(candidates), size=min(settings.kg_proposals, len(candidates)), replace=False)
        top = np.argsort(mean_full, kind="stable")[:8]
        proposal_configs = sorted({int(candidates[i]) for i in np.concatenate([sample, top])})
        pairs = [(i, level) for i in proposal_configs for level in levels if (i, level) not in observed]
        if not pairs:
            pairs = [(int(i), level) for i in order for level in levels if (int(i), level) not in observed][:1]
            if not pairs:
                state.exhausted = True
                break
            evaluate(*pairs[0])
            continue

        discretization = np.vstack([full_points, encoder.encode_many([configs[i] for i in proposal_configs])])
        encoded_pairs = encoder.encode_many([configs[i] for i, _ in pairs], [level for _, level in pairs])
        kg = knowledge_gradient(model, discretization, encoded_pairs, normals)
        costs = np.array([cost_model.predict(configs[i], level) for i, level in pairs])
        if np.all(kg <= 0.0):
            choice = int(np.argmin(costs))
            logger.debug("[%s seed %d] zero knowledge gradient, taking the cheapest proposal", label, seed)
        else:
            choice = int(np.argmax(kg / costs))
        evaluate(*pairs[choice])

    if len(observed) >= 2:
        keys = list(observed)
        try:
            model = surrogate.fit(
                encoder.encode_many([configs[i] for i, _ in keys], [f for _, f in keys]),
                np.array([observed[k] for k in keys]), seed=seed)
            mean_full, _ = surrogate.predict(model, full_points)
            state.recommend(configs[int(candidates[int(np.argmin(mean_full))])])
        except FitError:
            state.recommend_best_observed()
    return state


def run_optimizer(spec: OptimizerSpec, space: SearchSpace, objective: Objective, budget: float,
                  seed: int) -> TunerState:
    """Dispatch an optimizer spec to its tuner."""
    if spec.name == "random":
        return random_search(space, objective, budget, seed, label=spec.label)
    if spec.name == "bo_ei":
        return bo_ei(space, objective, budget, seed, spec.init_design_size, label=spec.label)
    if spec.name == "hyperband":
        return hyperband(space, objective, budget, seed, eta=spec.eta, label=spec.label)
    return mf_costaware(space, objective, spec.fidelity_dims, budget, seed, spec.init_design_size,
                        label=spec.label)
