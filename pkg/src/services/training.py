import logging
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np

from src.conf.config import settings
from src.exceptions import ConfigurationError, DivergenceError
from src.repository.datasets import DatasetAppender, TabularDataset, load_dataset, save_dataset
from src.schemas import AttackSpec, EvalRecord, FidelityPoint, HPConfig, ModelSpec, SearchSpace
from src.services.attacks import pgd
from src.services.space import FidelityGrid, enumerate_space
from src.services.toymodel import ToyDataset, ToyMLP

logger = logging.getLogger(__name__)

CostMode = Literal["wallclock", "simulated"]


def round_half_up(numerator: int, denominator: int) -> int:
    """Round numerator / denominator to the nearest integer, halves going up."""
    return (2 * numerator + denominator) // (2 * denominator)


@dataclass(frozen=True)
class TrainPlan:
    config: HPConfig
    fidelity: FidelityPoint
    attack: AttackSpec
    seed: int

    @classmethod
    def build(cls, config: HPConfig, fidelity: FidelityPoint, epsilon: float, seed: int) -> "TrainPlan":
        attack = AttackSpec(epsilon=epsilon, iters=fidelity.attack_iters, alpha=config.pgd_alpha)
        return cls(config=config, fidelity=fidelity, attack=attack, seed=seed)

    @property
    def st_epochs(self) -> int:
        return round_half_up(self.fidelity.epochs * (100 - self.config.rat_pct), 100)

    @property
    def at_epochs(self) -> int:
        return self.fidelity.epochs - self.st_epochs


class MomentumSGD:
    """
    SGD with classical momentum: ``v <- m * v - lr * grad; theta <- theta + v``.
    Parameters are updated in place.
    """

    def __init__(self, lr: float, momentum: float):
        if lr < 0 or not 0 <= momentum < 1:
            raise ConfigurationError(f"Invalid optimizer settings lr={lr}, momentum={momentum}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, grad in grads.items():
            velocity = self.velocity.get(name)
            if velocity is None:
                velocity = np.zeros_like(grad)
            velocity = self.momentum * velocity - self.lr * grad
            self.velocity[name] = velocity
            params[name] += velocity


@dataclass
class WorkCounter:
    """Counts example-level forward/backward passes, the unit of simulated cost."""
    passes: int = 0

    def seconds(self) -> float:
        return self.passes * settings.simulated_unit_cost


def _check_loss(loss: float, phase: str, epoch: int, batch: int) -> None:
    if not np.isfinite(loss) or loss > settings.divergence_threshold:
        raise DivergenceError(f"Training diverged in {phase} phase at epoch {epoch}, batch {batch} (loss={loss})",
                              phase=phase, epoch=epoch, batch=batch)


def _run_epoch(model: ToyMLP, x: np.ndarray, y: np.ndarray, optimizer: MomentumSGD, batch_size: int,
               rng: np.random.Generator, phase: str, epoch: int, counter: Optional[WorkCounter],
               perturb: Optional[Callable[[np.ndarray, np.ndarray, int], np.ndarray]] = None) -> float:
    order = rng.permutation(len(y))
    losses = []
    for batch, start in enumerate(range(0, len(y), batch_size)):
        idx = order[start:start + batch_size]
        xb, yb = x[idx], y[idx]
        if perturb is not None:
            xb = perturb(xb, yb, batch)
        loss, grads = model.parameter_gradients(xb, yb)
        _check_loss(loss, phase, epoch, batch)
        optimizer.step(model.params(), grads)
        if counter is not None:
            counter.passes += len(yb)
        losses.append(loss)
    return float(np.mean(losses))


def sgd_epoch(model: ToyMLP, x: np.ndarray, y: np.ndarray, optimizer: MomentumSGD, batch_size: int,
              rng: np.random.Generator, epoch: int = 0, counter: Optional[WorkCounter] = None,
              phase: str = "ST") -> float:
    """
    One pass of momentum SGD over shuffled mini-batches of clean data.

    :param model: ToyMLP: Model, updated in place
    :param x: np.ndarray: Training inputs
    :param y: np.ndarray: Training labels
    :param optimizer: MomentumSGD: Optimizer carrying lr, momentum and velocity
    :param batch_size: int: Mini-batch size
    :param rng: np.random.Generator: Shuffling generator
    :param epoch: int: Epoch index, for divergence reports
    :param counter: Optional[WorkCounter]: Simulated cost accounting
    :param phase: str: Phase name, for divergence reports
    :return: Mean batch loss of the epoch
    """
    return _run_epoch(model, x, y, optimizer, batch_size, rng, phase, epoch, counter)


def adversarial_epoch(model: ToyMLP, x: np.ndarray, y: np.ndarray, optimizer: MomentumSGD, batch_size: int,
                      ae_pct: int, attack: AttackSpec, rng: np.random.Generator, epoch: int = 0,
                      counter: Optional[WorkCounter] = None) -> float:
    """
    One pass of adversarial training. In every batch of size B the first
    round(B * ae_pct / 100) examples are replaced by their PGD perturbation against
    the current model; the rest stay clean and labels are kept.

    :param ae_pct: int: Percentage of adversarial examples per batch
    :param attack: AttackSpec: Attack used to craft training examples
    :return: Mean batch loss of the epoch
    """

    def perturb(xb: np.ndarray, yb: np.ndarray, batch: int) -> np.ndarray:
        n_adv = round_half_up(len(yb) * ae_pct, 100)
        if n_adv == 0 or attack.epsilon == 0:
            return xb
        delta = pgd(model, xb[:n_adv], yb[:n_adv], attack, rng=rng, batch=batch).delta
        if counter is not None:
            counter.passes += n_adv * attack.iters
        xb = xb.copy()
        xb[:n_adv] += delta
        return xb

    return _run_epoch(model, x, y, optimizer, batch_size, rng, "AT", epoch, counter, perturb)


@dataclass
class TrainResult:
    model: ToyMLP
    train_time: float
    st_epochs: int
    at_epochs: int
    loss_trace: List[Tuple[str, float]] = field(default_factory=list)


def train_two_phase(plan: TrainPlan, data: ToyDataset, model_spec: Optional[ModelSpec] = None,
                    cost: CostMode = "wallclock") -> TrainResult:
    """
    Train a fresh model with st_epochs of standard training followed by at_epochs of
    adversarial training, as split by %RAT. Reproducible per plan seed.

    :param plan: TrainPlan: Configuration, fidelity, training attack and seed
    :param data: ToyDataset: Training data
    :param model_spec: Optional[ModelSpec]: Architecture
    :param cost: CostMode: Measure wall-clock seconds or count simulated work
    :return: The trained model, its training cost and the per-epoch loss trace
    """
    cfg = plan.config
    rng = np.random.default_rng(plan.seed)
    model = ToyMLP.initialize(data.n_features, data.n_classes, model_spec or ModelSpec(), rng)
    counter = WorkCounter()
    trace: List[Tuple[str, float]] = []
    started = time.perf_counter()

    if plan.st_epochs:
        optimizer = MomentumSGD(cfg.st_lr, cfg.st_momentum)
        for epoch in range(plan.st_epochs):
            trace.append(("ST", sgd_epoch(model, data.x_train, data.y_train, optimizer, cfg.st_batch, rng,
                                          epoch=epoch, counter=counter)))
    if plan.at_epochs:
        optimizer = MomentumSGD(cfg.at_lr, cfg.at_momentum)
        for epoch in range(plan.at_epochs):
            trace.append(("AT", adversarial_epoch(model, data.x_train, data.y_train, optimizer, cfg.at_batch,
                                                  cfg.ae_pct, plan.attack, rng, epoch=epoch, counter=counter)))

    elapsed = time.perf_counter() - started
    train_time = elapsed if cost == "wallclock" else counter.seconds()
    return TrainResult(model=model, train_time=train_time, st_epochs=plan.st_epochs,
                       at_epochs=plan.at_epochs, loss_trace=trace)


def evaluation_attack(config: HPConfig, epsilon: float) -> AttackSpec:
    """The fixed full-strength evaluation attack: PGD with the configured step and zero start."""
    return AttackSpec(epsilon=epsilon, iters=settings.eval_attack_iters, alpha=config.pgd_alpha)


def evaluate(model: ToyMLP, x: np.ndarray, y: np.ndarray, attack: AttackSpec) -> Tuple[float, float]:
    """
    Standard and adversarial misclassification rates.

    An example counts as adversarially misclassified when it is wrong on the clean
    input or on the attacked input, since the attacker may always keep delta = 0.

    :param model: ToyMLP: Trained model
    :param x: np.ndarray: Test inputs
    :param y: np.ndarray: Test labels
    :param attack: AttackSpec: Evaluation attack
    :return: (std_error, adv_error)
    """
    clean_wrong = model.predict(x) != y
    if attack.epsilon == 0:
        adv_wrong = clean_wrong
    else:
        delta = pgd(model, x, y, attack, rng=np.random.default_rng(0)).delta
        adv_wrong = clean_wrong | (model.predict(x + delta) != y)
    return float(np.mean(clean_wrong)), float(np.mean(adv_wrong))


@dataclass(frozen=True)
class SweepCell:
    config: HPConfig
    fidelity: FidelityPoint
    epsilon: float
    seed: int

    @property
    def key(self) -> tuple:
        return self.config.astuple(), self.fidelity.astuple(), self.epsilon, self.seed


_worker_context: Dict[str, object] = {}


def _init_worker(data: ToyDataset, model_spec: ModelSpec, cost: CostMode) -> None:
    _worker_context.update(data=data, model_spec=model_spec, cost=cost)


def run_cell(cell: SweepCell) -> EvalRecord:
    """
    Train and evaluate one sweep cell. A diverged run is recorded with both errors at 1.0.
    """
    data: ToyDataset = _worker_context["data"]
    plan = TrainPlan.build(cell.config, cell.fidelity, cell.epsilon, cell.seed)
    started = time.perf_counter()
    try:
        result = train_two_phase(plan, data, _worker_context["model_spec"], _worker_context["cost"])
        std_error, adv_error = evaluate(result.model, data.x_test, data.y_test,
                                        evaluation_attack(cell.config, cell.epsilon))
        train_time = result.train_time
    except DivergenceError as err:
        logger.warning("Diverged cell %s: %s", cell.key, err.detail)
        std_error = adv_error = 1.0
        train_time = time.perf_counter() - started
    return EvalRecord(config=cell.config, fidelity=cell.fidelity, epsilon=cell.epsilon, std_error=std_error,
                      adv_error=adv_error, train_time=train_time, seed=cell.seed)


def _execute(cells: Sequence[SweepCell], data: ToyDataset, model_spec: ModelSpec, cost: CostMode,
             jobs: int) -> Iterator[EvalRecord]:
    if jobs <= 1:
        _init_worker(data, model_spec, cost)
        yield from map(run_cell, cells)
        return
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker,
                             initargs=(data, model_spec, cost)) as executor:
        yield from executor.map(run_cell, cells, chunksize=max(1, len(cells) // (jobs * 16)))


def sweep_cells(space: SearchSpace, seeds: Sequence[int]) -> List[SweepCell]:
    grid = FidelityGrid.from_space(space)
    return [SweepCell(config, fidelity, eps, seed)
            for config in enumerate_space(space)
            for fidelity in grid.points()
            for eps in space.epsilons
            for seed in seeds]


def grid_sweep(space: SearchSpace, data: ToyDataset, seeds: Sequence[int],
               model_spec: Optional[ModelSpec] = None, output: Union[str, Path, None] = None,
               jobs: int = 1, cost: CostMode = "wallclock", resume: bool = True) -> TabularDataset:
    """
    Exhaustively train and evaluate every (config, fidelity, epsilon, seed) cell.

    Finished cells are appended to ``output`` as they complete, so re-running with
    ``resume`` only computes the keys still missing. When the sweep ends the output
    is rewritten sorted by key.

    :param space: SearchSpace: Configurations, fidelity grid and bounds
    :param data: ToyDataset: Train/test data
    :param seeds: Sequence[int]: Training seeds
    :param model_spec: Optional[ModelSpec]: Architecture
    :param output: Optional path of the dataset file (in progress and final)
    :param jobs: int: Worker processes
    :param cost: CostMode: Wall-clock or simulated training cost
    :param resume: bool: Keep records already present in ``output``
    :return: The dataset holding existing and new records
    """
    if not seeds:
        raise ConfigurationError("At least one seed is required")
    if not space.epsilons:
        raise ConfigurationError("Empty epsilon set")
    model_spec = model_spec or ModelSpec()
    cells = sweep_cells(space, seeds)

    existing: List[EvalRecord] = []
    if output is not None:
        output = Path(output)
        if output.exists() and output.stat().st_size > 0:
            if resume:
                existing = load_dataset(output).records
            else:
                output.unlink()
    present = {record.key for record in existing}
    pending = [cell for cell in cells if cell.key not in present]
    logger.info("Sweep over %d cells: %d already present, %d to run", len(cells), len(cells) - len(pending),
                len(pending))

    fresh: List[EvalRecord] = []
    started = time.perf_counter()
    report_every = max(1, len(pending) // 20)
    with DatasetAppender(output) if output is not None else nullcontext() as appender:
        for done, record in enumerate(_execute(pending, data, model_spec, cost, jobs), start=1):
            fresh.append(record)
            if appender is not None:
                appender.write(record)
            if done % report_every == 0 or done == len(pending):
                elapsed = time.perf_counter() - started
                eta = elapsed / done * (len(pending) - done)
                logger.info("Sweep progress %d/%d cells, ETA %.0f s", done, len(pending), eta)

    dataset = TabularDataset(existing + fresh, space=space,
                             provenance={"generator": "grid_sweep", "data": data.spec.kind, "cost": cost})
    if output is not None and len(dataset):
        save_dataset(dataset, output)
    return dataset


class TrainingEvaluator:
    """
    Live evaluator for the tuners: trains a fresh model for (config, fidelity) and
    returns (std_error, adv_error, cost). A diverged run scores 1.0 on both errors.
    """

    def __init__(self, data: ToyDataset, epsilon: float, seed: int = 0, model_spec: Optional[ModelSpec] = None,
                 cost: CostMode = "wallclock"):
        self.data = data
        self.epsilon = epsilon
        self.seed = seed
        self.model_spec = model_spec or ModelSpec()
        self.cost = cost
        self.calls = 0

    def __call__(self, config: HPConfig, fidelity: FidelityPoint) -> Tuple[float, float, float]:
        self.calls += 1
        _init_worker(self.data, self.model_spec, self.cost)
        record = run_cell(SweepCell(config, fidelity, self.epsilon, self.seed))
        logger.info("Trained %s at %s: std=%.4f adv=%.4f cost=%.3f", config.astuple(), fidelity.astuple(),
                    record.std_error, record.adv_error, record.train_time)
        return record.std_error, record.adv_error, record.train_time
